fn main() {
    std::process::exit(grouptron_cli::run(std::env::args_os()));
}
