//! Displacement metrics, evaluation protocols and trajectory plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifact::ArtifactHeader;
use crate::dataio::Window;
use crate::error::{Error, Result};
use crate::grouping::{cluster_trajectories, GroupAssignment, Linkage};
use crate::model::PredictionOutput;
use crate::{PedId, Point, FUTURE_LEN, HISTORY_LEN};

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn check_lengths(pred: &[Point], truth: &[Point]) -> Result<()> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::arg(format!(
            "prediction has {} steps, ground truth {}",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

/// Distance between the final predicted and true positions.
pub fn fde(pred: &[Point], truth: &[Point]) -> Result<f64> {
    check_lengths(pred, truth)?;
    Ok(dist(pred[pred.len() - 1], truth[truth.len() - 1]))
}

/// Mean per-step distance between prediction and ground truth.
pub fn ade(pred: &[Point], truth: &[Point]) -> Result<f64> {
    check_lengths(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| dist(*p, *t)).sum::<f64>() / pred.len() as f64)
}

/// The lowest FDE among `samples` and the ADE of that same sample. Ties keep
/// the earliest sample.
pub fn best_of_k(samples: &[Vec<Point>], truth: &[Point]) -> Result<(f64, f64)> {
    let mut best: Option<(f64, usize)> = None;
    for (i, s) in samples.iter().enumerate() {
        let f = fde(s, truth)?;
        if best.is_none_or(|(b, _)| f < b) {
            best = Some((f, i));
        }
    }
    let (f, i) = best.ok_or_else(|| Error::arg("best_of_k needs at least one sample"))?;
    Ok((f, ade(&samples[i], truth)?))
}

/// Extrapolates the last observed per-tick displacement for `FUTURE_LEN` ticks.
pub fn constant_velocity_baseline(window: &Window) -> Vec<Point> {
    let h = &window.history;
    let last = h[h.len() - 1];
    let v = if h.len() >= 2 {
        let prev = h[h.len() - 2];
        [last[0] - prev[0], last[1] - prev[1]]
    } else {
        [0.0, 0.0]
    };
    (1..=FUTURE_LEN)
        .map(|k| [last[0] + v[0] * k as f64, last[1] + v[1] * k as f64])
        .collect()
}

/// Evaluation protocol; serialized as `most_likely`, `best_of_20`, `constant_velocity`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    MostLikely,
    BestOfK(usize),
    ConstantVelocity,
}

impl Protocol {
    pub fn name(&self) -> String {
        match self {
            Protocol::MostLikely => "most_likely".into(),
            Protocol::BestOfK(k) => format!("best_of_{k}"),
            Protocol::ConstantVelocity => "constant_velocity".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "most_likely" => Ok(Protocol::MostLikely),
            "constant_velocity" => Ok(Protocol::ConstantVelocity),
            _ => s
                .strip_prefix("best_of_")
                .and_then(|k| k.parse().ok())
                .filter(|&k| k > 0)
                .map(Protocol::BestOfK)
                .ok_or_else(|| Error::arg(format!("unknown protocol {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub protocol: String,
    pub dataset: String,
    pub fde: f64,
    pub ade: f64,
    pub n_windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub header: ArtifactHeader,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn row(&self, protocol: &str, dataset: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.protocol == protocol && r.dataset == dataset)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# {}", serde_json::to_string(&self.header)?)?;
        writeln!(out, "protocol,dataset,fde,ade,n_windows")?;
        for r in &self.rows {
            writeln!(out, "{},{},{:?},{:?},{}", r.protocol, r.dataset, r.fde, r.ade, r.n_windows)?;
        }
        Ok(())
    }

    pub fn write_json<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut out, self)?;
        writeln!(out)?;
        Ok(())
    }
}

/// Mean FDE and ADE of one protocol over aligned windows and predictions,
/// summed in window order.
pub fn evaluate(
    dataset: &str,
    protocol: Protocol,
    windows: &[Window],
    predictions: &[PredictionOutput],
) -> Result<EvalRow> {
    if windows.is_empty() {
        return Err(Error::arg(format!("no windows to evaluate for {dataset}")));
    }
    if protocol != Protocol::ConstantVelocity && predictions.len() != windows.len() {
        return Err(Error::arg(format!(
            "{} predictions for {} windows",
            predictions.len(),
            windows.len()
        )));
    }
    let (mut f, mut a) = (0.0, 0.0);
    for (i, w) in windows.iter().enumerate() {
        let (wf, wa) = match protocol {
            Protocol::ConstantVelocity => {
                let p = constant_velocity_baseline(w);
                (fde(&p, &w.future)?, ade(&p, &w.future)?)
            }
            Protocol::MostLikely => {
                let p = &predictions[i];
                check_alignment(w, p)?;
                (fde(&p.most_likely, &w.future)?, ade(&p.most_likely, &w.future)?)
            }
            Protocol::BestOfK(k) => {
                let p = &predictions[i];
                check_alignment(w, p)?;
                if p.samples.len() < k {
                    return Err(Error::arg(format!(
                        "best_of_{k} needs {k} samples, prediction has {}",
                        p.samples.len()
                    )));
                }
                let s: Vec<Vec<Point>> = p.samples[..k].iter().map(|s| s.trajectory.clone()).collect();
                best_of_k(&s, &w.future)?
            }
        };
        f += wf;
        a += wa;
    }
    let n = windows.len();
    Ok(EvalRow {
        protocol: protocol.name(),
        dataset: dataset.to_string(),
        fde: f / n as f64,
        ade: a / n as f64,
        n_windows: n,
    })
}

fn check_alignment(w: &Window, p: &PredictionOutput) -> Result<()> {
    if (w.scene.as_str(), w.t0, w.node) != (p.scene.as_str(), p.t0, p.node) {
        return Err(Error::arg(format!(
            "prediction for {}/{}/{} does not match window {}/{}/{}",
            p.scene, p.t0, p.node, w.scene, w.t0, w.node
        )));
    }
    Ok(())
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf", "#bcbd22", "#7f7f7f",
];

/// Grouping used to colour one plot: the plotted pedestrians clustered on
/// their observed histories.
pub fn plot_groups(windows: &[&Window], linkage: Linkage) -> Result<GroupAssignment> {
    let ids: Vec<PedId> = windows.iter().map(|w| w.node).collect();
    let trajectories: Vec<Vec<Point>> = windows.iter().map(|w| w.history.clone()).collect();
    cluster_trajectories(&ids, &trajectories, linkage)
}

fn file_stem(scene: &str, t0: usize) -> String {
    let safe: String = scene
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{safe}_t{t0:05}")
}

struct Frame {
    min: Point,
    max: Point,
    scale: f64,
}

const MARGIN: f64 = 20.0;
const SIZE: f64 = 600.0;

impl Frame {
    fn new<'a>(points: impl Iterator<Item = &'a Point>) -> Self {
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for p in points {
            for c in 0..2 {
                min[c] = min[c].min(p[c]);
                max[c] = max[c].max(p[c]);
            }
        }
        let span = (max[0] - min[0]).max(max[1] - min[1]).max(1e-6);
        Frame {
            min,
            max,
            scale: (SIZE - 2.0 * MARGIN) / span,
        }
    }

    fn polyline(&self, pts: &[Point]) -> String {
        let mut s = String::new();
        for (i, p) in pts.iter().enumerate() {
            let x = MARGIN + (p[0] - self.min[0]) * self.scale;
            let y = MARGIN + (self.max[1] - p[1]) * self.scale;
            let _ = write!(s, "{}{x:.2},{y:.2}", if i == 0 { "" } else { " " });
        }
        s
    }
}

fn render(windows: &[&Window], preds: &[&PredictionOutput], groups: &GroupAssignment) -> String {
    let frame = Frame::new(windows.iter().flat_map(|w| w.history.iter().chain(&w.future)).chain(
        preds.iter().flat_map(|p| p.most_likely.iter()),
    ));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">
<rect width="100%" height="100%" fill="white"/>"#
    );
    for (w, p) in windows.iter().zip(preds) {
        let g = groups.group_of(w.node).unwrap_or(0);
        let colour = PALETTE[g % PALETTE.len()];
        let observed = &w.history;
        let mut truth = vec![w.history[HISTORY_LEN - 1]];
        truth.extend_from_slice(&w.future);
        let mut pred = vec![w.history[HISTORY_LEN - 1]];
        pred.extend_from_slice(&p.most_likely);
        let _ = writeln!(
            s,
            r##"<g class="group-{g}" data-ped="{}">
<polyline class="history" points="{}" fill="none" stroke="{colour}" stroke-width="2" stroke-dasharray="6 4"/>
<polyline class="truth" points="{}" fill="none" stroke="#999999" stroke-width="2" stroke-dasharray="3 3"/>
<polyline class="prediction" points="{}" fill="none" stroke="{colour}" stroke-width="2"/>
</g>"##,
            w.node,
            frame.polyline(observed),
            frame.polyline(&truth),
            frame.polyline(&pred),
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes one SVG per (scene, tick): dashed coloured histories, dashed grey
/// ground truth and solid coloured most-likely predictions, coloured by group.
/// Returns the written paths in order.
pub fn emit_plots(
    windows: &[Window],
    predictions: &[PredictionOutput],
    dir: &Path,
    linkage: Linkage,
) -> Result<Vec<PathBuf>> {
    if windows.len() != predictions.len() {
        return Err(Error::arg(format!(
            "{} predictions for {} windows",
            predictions.len(),
            windows.len()
        )));
    }
    let mut by_tick: BTreeMap<(&str, usize), Vec<usize>> = BTreeMap::new();
    for (i, (w, p)) in windows.iter().zip(predictions).enumerate() {
        check_alignment(w, p)?;
        by_tick.entry((w.scene.as_str(), w.t0)).or_default().push(i);
    }
    if by_tick.is_empty() {
        return Ok(Vec::new());
    }
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::with_capacity(by_tick.len());
    for ((scene, t0), idx) in by_tick {
        let ws: Vec<&Window> = idx.iter().map(|&i| &windows[i]).collect();
        let ps: Vec<&PredictionOutput> = idx.iter().map(|&i| &predictions[i]).collect();
        let groups = plot_groups(&ws, linkage)?;
        let path = dir.join(format!("{}.svg", file_stem(scene, t0)));
        std::fs::write(&path, render(&ws, &ps, &groups))?;
        out.push(path);
    }
    Ok(out)
}
