//! ETH/UCY trajectory files, scenes and prediction windows.
//!
//! Input files hold one observation per line: `frame ped_id x y`, separated by
//! any whitespace. Frames are remapped onto consecutive ticks of [`DT`] seconds
//! using the GCD of the observed frame deltas, and tracks with missing interior
//! frames are filled by linear interpolation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{PedId, Point, DT, FUTURE_LEN, HISTORY_LEN};

/// One line of an input file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawRecord {
    pub frame: i64,
    pub ped: PedId,
    pub x: f64,
    pub y: f64,
}

/// A contiguous run of positions for one pedestrian starting at tick `start`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub start: usize,
    pub positions: Vec<Point>,
}

impl Track {
    /// One past the last tick covered by the track.
    pub fn end(&self) -> usize {
        self.start + self.positions.len()
    }

    pub fn covers(&self, tick: usize) -> bool {
        tick >= self.start && tick < self.end()
    }

    pub fn at(&self, tick: usize) -> Option<Point> {
        if self.covers(tick) {
            Some(self.positions[tick - self.start])
        } else {
            None
        }
    }
}

/// All tracks of one recording on a uniform tick grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub name: String,
    pub dt: f64,
    /// Source frame number of tick 0.
    pub first_frame: i64,
    /// Source frames per tick.
    pub frame_stride: i64,
    pub num_ticks: usize,
    pub tracks: BTreeMap<PedId, Track>,
}

impl Scene {
    pub fn empty(name: impl Into<String>) -> Self {
        Scene {
            name: name.into(),
            dt: DT,
            first_frame: 0,
            frame_stride: 1,
            num_ticks: 0,
            tracks: BTreeMap::new(),
        }
    }

    /// Number of pedestrians observed at `tick`.
    pub fn headcount(&self, tick: usize) -> usize {
        self.tracks.values().filter(|t| t.covers(tick)).count()
    }

    /// Pedestrians observed at `tick`, in id order.
    pub fn present(&self, tick: usize) -> Vec<PedId> {
        self.tracks
            .iter()
            .filter(|(_, t)| t.covers(tick))
            .map(|(&id, _)| id)
            .collect()
    }

    /// Writes the scene back in the four-column input format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for tick in 0..self.num_ticks {
            let frame = self.first_frame + tick as i64 * self.frame_stride;
            for (id, track) in &self.tracks {
                if let Some([x, y]) = track.at(tick) {
                    let _ = writeln!(out, "{frame} {id} {x:?} {y:?}");
                }
            }
        }
        out
    }
}

fn parse_integral(tok: &str, what: &str, line: usize) -> Result<i64> {
    let v: f64 = tok.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("{what} {tok:?} is not a number"),
    })?;
    if !v.is_finite() || v.fract() != 0.0 || v.abs() > 9.0e15 {
        return Err(Error::Parse {
            line,
            msg: format!("{what} {tok:?} is not an integer"),
        });
    }
    Ok(v as i64)
}

fn parse_coord(tok: &str, what: &str, line: usize) -> Result<f64> {
    let v: f64 = tok.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("{what} {tok:?} is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            msg: format!("{what} {tok:?} is not finite"),
        });
    }
    Ok(v)
}

/// Parses the four-column text format into raw records, in file order.
pub fn parse_records(text: &str) -> Result<Vec<RawRecord>> {
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let toks: Vec<&str> = raw.split_whitespace().collect();
        if toks.len() != 4 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 4 columns, found {}", toks.len()),
            });
        }
        let frame = parse_integral(toks[0], "frame", line)?;
        if frame < 0 {
            return Err(Error::Parse {
                line,
                msg: format!("negative frame {frame}"),
            });
        }
        let ped = parse_integral(toks[1], "pedestrian id", line)?;
        let x = parse_coord(toks[2], "x", line)?;
        let y = parse_coord(toks[3], "y", line)?;
        records.push(RawRecord { frame, ped, x, y });
    }
    Ok(records)
}

fn gcd(mut a: i64, mut b: i64) -> i64 {
    while b != 0 {
        let r = a % b;
        a = b;
        b = r;
    }
    a.abs()
}

/// Builds a scene from records. Frames may arrive in any order.
pub fn scene_from_records(name: &str, records: &[RawRecord]) -> Result<Scene> {
    if records.is_empty() {
        return Ok(Scene::empty(name));
    }
    let mut frames: Vec<i64> = records.iter().map(|r| r.frame).collect();
    frames.sort_unstable();
    frames.dedup();
    let stride = frames
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(0, gcd)
        .max(1);
    let first = frames[0];
    let num_ticks = ((frames[frames.len() - 1] - first) / stride) as usize + 1;

    let mut per_ped: BTreeMap<PedId, BTreeMap<usize, Point>> = BTreeMap::new();
    for r in records {
        let tick = ((r.frame - first) / stride) as usize;
        if per_ped
            .entry(r.ped)
            .or_default()
            .insert(tick, [r.x, r.y])
            .is_some()
        {
            return Err(Error::Data(format!(
                "duplicate observation of pedestrian {} at frame {}",
                r.ped, r.frame
            )));
        }
    }

    let mut tracks = BTreeMap::new();
    for (ped, obs) in per_ped {
        let (&start, _) = obs.iter().next().expect("non-empty");
        let (&last, _) = obs.iter().next_back().expect("non-empty");
        let mut positions = Vec::with_capacity(last - start + 1);
        let known: Vec<(usize, Point)> = obs.into_iter().collect();
        for pair in known.windows(2) {
            let (t0, p0) = pair[0];
            let (t1, p1) = pair[1];
            positions.push(p0);
            let span = (t1 - t0) as f64;
            for k in 1..(t1 - t0) {
                let a = k as f64 / span;
                positions.push([p0[0] + a * (p1[0] - p0[0]), p0[1] + a * (p1[1] - p0[1])]);
            }
        }
        positions.push(known[known.len() - 1].1);
        tracks.insert(ped, Track { start, positions });
    }

    Ok(Scene {
        name: name.to_string(),
        dt: DT,
        first_frame: first,
        frame_stride: stride,
        num_ticks,
        tracks,
    })
}

/// Parses a whole trajectory file into a scene.
pub fn parse_dataset(name: &str, text: &str) -> Result<Scene> {
    scene_from_records(name, &parse_records(text)?)
}

/// Reads and parses a trajectory file; the scene is named after the file stem.
pub fn load_scene(path: &std::path::Path) -> Result<Scene> {
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let text = std::fs::read_to_string(path)?;
    parse_dataset(&name, &text)
}

/// A neighbour's history inside a window; `None` where the neighbour was not yet observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: PedId,
    pub history: Vec<Option<Point>>,
}

impl Neighbor {
    /// Observed history positions, oldest first.
    pub fn observed(&self) -> Vec<Point> {
        self.history.iter().flatten().copied().collect()
    }
}

/// One prediction instance: `HISTORY_LEN` observed positions ending at tick `t0`
/// and the `FUTURE_LEN` positions that follow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub scene: String,
    /// Tick of the last observed history position.
    pub t0: usize,
    pub node: PedId,
    pub history: Vec<Point>,
    pub future: Vec<Point>,
    /// Other pedestrians present at `t0`, sorted by id.
    pub neighbors: Vec<Neighbor>,
    /// Pedestrians present in the scene at `t0`, including the node.
    pub present: usize,
}

impl Window {
    pub fn last_position(&self) -> Point {
        self.history[HISTORY_LEN - 1]
    }

    pub fn neighbor(&self, id: PedId) -> Option<&Neighbor> {
        self.neighbors.iter().find(|n| n.id == id)
    }

    /// History positions of `id` (the node itself or a neighbour).
    pub fn history_of(&self, id: PedId) -> Option<Vec<Option<Point>>> {
        if id == self.node {
            Some(self.history.iter().copied().map(Some).collect())
        } else {
            self.neighbor(id).map(|n| n.history.clone())
        }
    }

    /// Node id followed by neighbour ids.
    pub fn ids(&self) -> Vec<PedId> {
        std::iter::once(self.node)
            .chain(self.neighbors.iter().map(|n| n.id))
            .collect()
    }
}

/// Cuts every full 8+12 window out of a scene, ordered by `t0` then node id.
pub fn make_windows(scene: &Scene) -> Vec<Window> {
    let span = HISTORY_LEN + FUTURE_LEN;
    let mut out = Vec::new();
    if scene.num_ticks < span {
        return out;
    }
    for t0 in (HISTORY_LEN - 1)..(scene.num_ticks - FUTURE_LEN) {
        let first = t0 + 1 - HISTORY_LEN;
        let present = scene.headcount(t0);
        for (&id, track) in &scene.tracks {
            if track.start > first || track.end() < t0 + 1 + FUTURE_LEN {
                continue;
            }
            let off = first - track.start;
            let history = track.positions[off..off + HISTORY_LEN].to_vec();
            let future = track.positions[off + HISTORY_LEN..off + span].to_vec();
            let neighbors = scene
                .tracks
                .iter()
                .filter(|(&other, t)| other != id && t.covers(t0))
                .filter_map(|(&other, t)| {
                    let hist: Vec<Option<Point>> = (first..=t0).map(|k| t.at(k)).collect();
                    (hist.iter().flatten().count() >= 2).then_some(Neighbor {
                        id: other,
                        history: hist,
                    })
                })
                .collect();
            out.push(Window {
                scene: scene.name.clone(),
                t0,
                node: id,
                history,
                future,
                neighbors,
                present,
            });
        }
    }
    out
}

/// Keeps windows whose current tick has at least `n` pedestrians present.
pub fn filter_univ_n(windows: &[Window], n: usize) -> Vec<Window> {
    windows.iter().filter(|w| w.present >= n).cloned().collect()
}

/// Per-step node features: relative position and finite-difference velocity.
pub type Feature = [f64; 4];

/// Relative features of the node and its neighbours for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeFeatures {
    pub node: Vec<Feature>,
    /// Neighbour features in window order; unobserved steps are zero.
    pub neighbors: Vec<(PedId, Vec<Feature>)>,
}

impl RelativeFeatures {
    pub fn of(&self, id: PedId, node: PedId) -> Option<&[Feature]> {
        if id == node {
            Some(&self.node)
        } else {
            self.neighbors
                .iter()
                .find(|(n, _)| *n == id)
                .map(|(_, f)| f.as_slice())
        }
    }
}

/// Relative positions and velocities for a partially observed sequence.
///
/// Velocity uses a backward difference, except at the first observed step
/// which takes the forward difference. Missing steps stay zero.
pub fn relative_sequence(seq: &[Option<Point>], origin: Point) -> Vec<Feature> {
    let mut out = vec![[0.0; 4]; seq.len()];
    let observed: Vec<usize> = (0..seq.len()).filter(|&i| seq[i].is_some()).collect();
    for (k, &i) in observed.iter().enumerate() {
        let p = seq[i].unwrap();
        let v = if observed.len() < 2 {
            [0.0, 0.0]
        } else if k == 0 {
            let q = seq[observed[1]].unwrap();
            [(q[0] - p[0]) / DT, (q[1] - p[1]) / DT]
        } else {
            let q = seq[observed[k - 1]].unwrap();
            [(p[0] - q[0]) / DT, (p[1] - q[1]) / DT]
        };
        out[i] = [p[0] - origin[0], p[1] - origin[1], v[0], v[1]];
    }
    out
}

/// Expresses node and neighbour histories relative to the node's last observed position.
pub fn to_relative(window: &Window) -> RelativeFeatures {
    let origin = window.last_position();
    let node_hist: Vec<Option<Point>> = window.history.iter().copied().map(Some).collect();
    RelativeFeatures {
        node: relative_sequence(&node_hist, origin),
        neighbors: window
            .neighbors
            .iter()
            .map(|n| (n.id, relative_sequence(&n.history, origin)))
            .collect(),
    }
}

/// Ground-truth future relative to the last observed position, with velocities
/// measured from the preceding position (the last history point for step 0).
pub fn future_relative(window: &Window) -> Vec<Feature> {
    let origin = window.last_position();
    let mut prev = origin;
    window
        .future
        .iter()
        .map(|&p| {
            let f = [
                p[0] - origin[0],
                p[1] - origin[1],
                (p[0] - prev[0]) / DT,
                (p[1] - prev[1]) / DT,
            ];
            prev = p;
            f
        })
        .collect()
}

/// Writes windows as JSON lines, preceded by an optional header line.
pub fn write_windows_jsonl<W: Write>(
    mut out: W,
    header: Option<&serde_json::Value>,
    windows: &[Window],
) -> Result<()> {
    if let Some(h) = header {
        serde_json::to_writer(&mut out, &serde_json::json!({ "header": h }))?;
        out.write_all(b"\n")?;
    }
    for w in windows {
        serde_json::to_writer(&mut out, w)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads windows written by [`write_windows_jsonl`], skipping the header line.
pub fn read_windows_jsonl<R: BufRead>(input: R) -> Result<Vec<Window>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if v.get("header").is_some() {
            continue;
        }
        out.push(serde_json::from_value(v)?);
    }
    Ok(out)
}
