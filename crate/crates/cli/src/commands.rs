use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use grouptron::artifact::ArtifactHeader;
use grouptron::dataio::{filter_univ_n, make_windows, Scene, Window};
use grouptron::eval::{emit_plots, evaluate, EvalReport, EvalRow, Protocol};
use grouptron::grouping::{dice, group_scene_tick, parse_annotations, GroupAssignment};
use grouptron::model::{Grouptron, PredictMode, PredictionOutput, WindowInputs};
use grouptron::stgraph::build_group;
use grouptron::synth::{crossing_corpus, CrossingConfig};
use grouptron::trainer::train;
use rayon::prelude::*;
use serde::Serialize;

use crate::args::{Command, GlobalArgs, ProtocolArg};
use crate::config::RunConfig;
use crate::files::{load_scenes, read_jsonl, write_json, write_jsonl};
use crate::CliError;

const BEST_OF: usize = 20;

type Res = Result<(), CliError>;

struct Ctx<'a> {
    out: &'a Path,
    cfg: RunConfig,
    protocol: Option<ProtocolArg>,
}

impl Ctx<'_> {
    fn header(&self, kind: &str) -> grouptron::Result<ArtifactHeader> {
        ArtifactHeader::new(kind, self.cfg.seed, &self.cfg)
    }

    fn path(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out.join(default))
    }
}

pub fn dispatch(global: &GlobalArgs, cfg: RunConfig, command: &Command) -> Res {
    let mut ctx = Ctx {
        out: &global.out,
        cfg,
        protocol: global.protocol,
    };
    match command {
        Command::Ingest { files } => write_scenes(&ctx, load_scenes(files)?),
        Command::Synth { scenes, prefix, noise } => {
            let mut sc = CrossingConfig::default();
            if let Some(n) = noise {
                sc.noise = *n;
            }
            write_scenes(&ctx, crossing_corpus(prefix, *scenes, &sc, ctx.cfg.seed)?)
        }
        Command::Windows { inputs, min_present } => windows(&ctx, inputs, *min_present),
        Command::Cluster {
            inputs,
            ticks,
            annotations,
        } => cluster(&ctx, inputs, ticks, annotations.as_deref()),
        Command::Train { windows, train } => {
            ctx.cfg.apply_train(train)?;
            train_cmd(&ctx, &ctx.path(windows, "windows.jsonl"))
        }
        Command::Predict { windows, model } => {
            let ws = read_jsonl::<Window>(&ctx.path(windows, "windows.jsonl"))?;
            let mpath = ctx.path(model, "model.bin");
            let preds = predict(&mut ctx, &mpath, &ws)?;
            write_jsonl(&ctx.out.join("predictions.jsonl"), &ctx.header("predictions")?, &preds)?;
            println!("{} predictions", preds.len());
            Ok(())
        }
        Command::Eval {
            windows,
            model,
            predictions,
            dataset,
        } => {
            let wpath = ctx.path(windows, "windows.jsonl");
            let ws = read_jsonl::<Window>(&wpath)?;
            let preds = match predictions {
                Some(p) => read_jsonl(p)?,
                None => {
                    let mpath = ctx.path(model, "model.bin");
                    predict(&mut ctx, &mpath, &ws)?
                }
            };
            let name = dataset.clone().unwrap_or_else(|| {
                wpath.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
            });
            eval(&ctx, &name, &ws, &preds)
        }
        Command::Inspect { windows, index } => inspect(&ctx, &ctx.path(windows, "windows.jsonl"), *index),
        Command::Plot { windows, predictions } => {
            let ws = read_jsonl::<Window>(&ctx.path(windows, "windows.jsonl"))?;
            let preds = read_jsonl::<PredictionOutput>(&ctx.path(predictions, "predictions.jsonl"))?;
            let paths = emit_plots(&ws, &preds, &ctx.out.join("plots"), ctx.cfg.model.linkage)?;
            println!("{} plots", paths.len());
            Ok(())
        }
    }
}

fn write_scenes(ctx: &Ctx, scenes: Vec<Scene>) -> Res {
    write_jsonl(&ctx.out.join("scenes.jsonl"), &ctx.header("scenes")?, &scenes)?;
    println!("{} scenes", scenes.len());
    Ok(())
}

fn scene_inputs(ctx: &Ctx, inputs: &[PathBuf]) -> grouptron::Result<Vec<Scene>> {
    if inputs.is_empty() {
        load_scenes(&[ctx.out.join("scenes.jsonl")])
    } else {
        load_scenes(inputs)
    }
}

fn windows(ctx: &Ctx, inputs: &[PathBuf], min_present: Option<usize>) -> Res {
    let scenes = scene_inputs(ctx, inputs)?;
    let mut ws: Vec<Window> = scenes.par_iter().flat_map_iter(make_windows).collect();
    if let Some(n) = min_present {
        ws = filter_univ_n(&ws, n);
    }
    write_jsonl(&ctx.out.join("windows.jsonl"), &ctx.header("windows")?, &ws)?;
    println!("{} windows", ws.len());
    Ok(())
}

#[derive(Serialize)]
struct TickGroups<'a> {
    scene: &'a str,
    tick: usize,
    groups: GroupAssignment,
}

fn cluster(ctx: &Ctx, inputs: &[PathBuf], ticks: &[usize], annotations: Option<&Path>) -> Res {
    let scenes = scene_inputs(ctx, inputs)?;
    if annotations.is_some() && scenes.len() != 1 {
        return Err(CliError::Usage(format!(
            "--annotations needs exactly one scene, got {}",
            scenes.len()
        )));
    }
    let linkage = ctx.cfg.model.linkage;
    let mut rows = Vec::new();
    for s in &scenes {
        let chosen: Vec<usize> = if ticks.is_empty() {
            (0..s.num_ticks).filter(|&t| s.headcount(t) > 0).collect()
        } else {
            ticks.to_vec()
        };
        let groups = chosen
            .par_iter()
            .map(|&t| group_scene_tick(s, t, linkage))
            .collect::<grouptron::Result<Vec<_>>>()?;
        rows.extend(chosen.into_iter().zip(groups).map(|(tick, groups)| TickGroups {
            scene: &s.name,
            tick,
            groups,
        }));
    }
    let score = match annotations {
        Some(path) => {
            let human = parse_annotations(&std::fs::read_to_string(path)?)?;
            let algo: Vec<GroupAssignment> = rows.iter().map(|r| r.groups.clone()).collect();
            let d = dice(&algo, &human)?;
            println!("dice {d}");
            Some(d)
        }
        None => None,
    };
    let doc = serde_json::json!({
        "header": ctx.header("groups")?,
        "assignments": rows,
        "dice": score,
    });
    write_json(&ctx.out.join("groups.json"), &doc)?;
    println!("{} groupings", rows.len());
    Ok(())
}

fn train_cmd(ctx: &Ctx, windows: &Path) -> Res {
    let ws = read_jsonl::<Window>(windows)?;
    let mut model = Grouptron::new(ctx.cfg.model.clone(), ctx.cfg.seed)?;
    let report = train(&mut model, &ws, &ctx.cfg.train, Some(ctx.out), |m| {
        eprintln!("epoch {:>4}  loss {:.6}  lr {:.3e}  {:.1}s", m.epoch, m.mean_loss, m.lr, m.wall_time_s);
    })?;
    model.save(&ctx.out.join("model.bin"), &ctx.header("checkpoint")?)?;
    if let Some((epoch, params)) = report.best.clone() {
        Grouptron::from_parts(ctx.cfg.model.clone(), params)?.save(&ctx.out.join("best.bin"), &ctx.header("checkpoint")?)?;
        eprintln!("lowest training loss at epoch {epoch}");
    }
    let metrics = BufWriter::new(File::create(ctx.out.join("metrics.csv"))?);
    report.write_csv(metrics, Some(&ctx.header("train_metrics")?.to_value()))?;
    println!("trained {} epochs on {} windows", report.epochs.len(), ws.len());
    Ok(())
}

/// Loads a checkpoint; its model configuration replaces the resolved one.
fn predict(ctx: &mut Ctx, model: &Path, ws: &[Window]) -> Result<Vec<PredictionOutput>, CliError> {
    let (m, _) = Grouptron::load(model)?;
    ctx.cfg.model = m.config.clone();
    let mode = match ctx.protocol {
        Some(ProtocolArg::MostLikely) => PredictMode::MostLikely,
        _ => PredictMode::SampleK(BEST_OF),
    };
    Ok(m.predict_all(ws, mode)?)
}

fn eval(ctx: &Ctx, dataset: &str, ws: &[Window], preds: &[PredictionOutput]) -> Res {
    let protocols = match ctx.protocol {
        Some(ProtocolArg::MostLikely) => vec![Protocol::MostLikely],
        Some(ProtocolArg::BestOf20) => vec![Protocol::BestOfK(BEST_OF)],
        None => vec![Protocol::MostLikely, Protocol::BestOfK(BEST_OF)],
    };
    let rows = protocols
        .into_iter()
        .chain([Protocol::ConstantVelocity])
        .map(|p| evaluate(dataset, p, ws, preds))
        .collect::<grouptron::Result<Vec<EvalRow>>>()?;
    let report = EvalReport {
        header: ctx.header("eval_report")?,
        rows,
    };
    report.write_csv(BufWriter::new(File::create(ctx.out.join("eval.csv"))?))?;
    report.write_json(BufWriter::new(File::create(ctx.out.join("eval.json"))?))?;
    for r in &report.rows {
        println!("{:<18} {:<12} fde {:.4}  ade {:.4}  n {}", r.protocol, r.dataset, r.fde, r.ade, r.n_windows);
    }
    Ok(())
}

fn inspect(ctx: &Ctx, windows: &Path, index: usize) -> Res {
    let ws = read_jsonl::<Window>(windows)?;
    let w = ws.get(index).ok_or_else(|| {
        CliError::Usage(format!("--index {index} out of range for {} windows", ws.len()))
    })?;
    let inputs = WindowInputs::prepare(w, &ctx.cfg.model)?;
    let doc = serde_json::json!({
        "header": ctx.header("graphs")?,
        "scene": w.scene,
        "t0": w.t0,
        "graphs": inputs.graph_dump(),
        "group_graphs": build_group(w, &inputs.assignment)?,
    });
    println!("{}", serde_json::to_string_pretty(&doc).map_err(grouptron::Error::from)?);
    Ok(())
}
