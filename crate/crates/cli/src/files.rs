//! JSON-lines artifacts: one `{"header": ...}` line, then one record per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use grouptron::artifact::ArtifactHeader;
use grouptron::dataio::{load_scene, Scene};
use grouptron::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub fn write_jsonl<T: Serialize>(path: &Path, header: &ArtifactHeader, items: &[T]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, &serde_json::json!({ "header": header }))?;
    out.write_all(b"\n")?;
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |msg: String| Error::Parse { line: i + 1, msg };
        let v: serde_json::Value = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        if v.get("header").is_some() {
            continue;
        }
        out.push(serde_json::from_value(v).map_err(|e| parse(format!("{}: {e}", path.display())))?);
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Scenes from raw trajectory files, or from `.jsonl` scene collections.
pub fn load_scenes(inputs: &[impl AsRef<Path>]) -> Result<Vec<Scene>> {
    let mut out = Vec::new();
    for p in inputs {
        let p = p.as_ref();
        if p.extension().is_some_and(|e| e == "jsonl") {
            out.extend(read_jsonl::<Scene>(p)?);
        } else {
            out.push(load_scene(p)?);
        }
    }
    Ok(out)
}
