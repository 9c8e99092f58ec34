//! Spatio-temporal graphs at the individual, group and scene levels.

use serde::{Deserialize, Serialize};

use crate::dataio::{to_relative, Window};
use crate::error::{Error, Result};
use crate::grouping::GroupAssignment;
use crate::{PedId, HISTORY_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Individual,
    Group,
    Scene,
}

/// Perception range of a pedestrian, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerceptionConfig {
    pub radius: f64,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        PerceptionConfig { radius: 3.0 }
    }
}

impl PerceptionConfig {
    pub fn new(radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::arg(format!("perception radius must be positive, got {radius}")));
        }
        Ok(PerceptionConfig { radius })
    }
}

/// Dense per-tick adjacency plus per-node feature sequences.
///
/// `features[node][tick]` is a feature vector; `adjacency[tick][i][j]` is the
/// weight of the directed edge `i → j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct STGraph {
    pub level: Level,
    pub node_ids: Vec<PedId>,
    pub features: Vec<Vec<Vec<f64>>>,
    pub adjacency: Vec<Vec<Vec<f64>>>,
}

impl STGraph {
    pub fn num_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn num_ticks(&self) -> usize {
        self.adjacency.len()
    }

    /// Checks the shape invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes();
        if self.features.len() != n {
            return Err(Error::arg("feature count differs from node count"));
        }
        let ticks = self.num_ticks();
        let dim = self.features.first().and_then(|f| f.first()).map_or(0, Vec::len);
        for f in &self.features {
            if f.len() != ticks || f.iter().any(|v| v.len() != dim) {
                return Err(Error::arg("ragged feature sequences"));
            }
        }
        for a in &self.adjacency {
            if a.len() != n || a.iter().any(|r| r.len() != n) {
                return Err(Error::arg("adjacency shape differs from node count"));
            }
            if (0..n).any(|i| a[i][i] != 0.0) {
                return Err(Error::arg("adjacency has self-loops"));
            }
        }
        Ok(())
    }

    /// Edge `i → j` present at any tick (indices into `node_ids`).
    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency.iter().any(|a| a[i][j] > 0.0)
    }
}

/// All-ones off-diagonal `n × n` matrix.
pub fn complete_adjacency(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 0.0 } else { 1.0 }).collect())
        .collect()
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `D` the degree matrix of `A + I`.
pub fn normalize_adjacency(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let deg: Vec<f64> = (0..n)
        .map(|i| 1.0 + a[i].iter().enumerate().filter(|&(j, _)| j != i).map(|(_, v)| v).sum::<f64>())
        .collect();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let v = if i == j { 1.0 + a[i][i] } else { a[i][j] };
                    v / (deg[i] * deg[j]).sqrt()
                })
                .collect()
        })
        .collect()
}

/// Individual-level graph: the node and all window neighbours, with a directed
/// edge whenever two observed pedestrians are within the perception radius.
pub fn build_individual(window: &Window, cfg: &PerceptionConfig) -> STGraph {
    let ids = window.ids();
    let feats = to_relative(window);
    let histories: Vec<Vec<Option<crate::Point>>> = ids
        .iter()
        .map(|&id| window.history_of(id).expect("id from window"))
        .collect();
    let n = ids.len();
    let adjacency = (0..HISTORY_LEN)
        .map(|t| {
            (0..n)
                .map(|i| {
                    (0..n)
                        .map(|j| match (histories[i][t], histories[j][t]) {
                            (Some(p), Some(q)) if i != j => {
                                let d = (p[0] - q[0]).hypot(p[1] - q[1]);
                                if d <= cfg.radius {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            _ => 0.0,
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let features = ids
        .iter()
        .map(|&id| {
            feats
                .of(id, window.node)
                .expect("id from window")
                .iter()
                .map(|f| f.to_vec())
                .collect()
        })
        .collect();
    STGraph {
        level: Level::Individual,
        node_ids: ids,
        features,
        adjacency,
    }
}

/// One fully connected graph per group.
pub fn build_group(window: &Window, assignment: &GroupAssignment) -> Result<Vec<STGraph>> {
    let feats = to_relative(window);
    assignment
        .groups()
        .iter()
        .map(|g| {
            let features = g
                .iter()
                .map(|&id| {
                    feats
                        .of(id, window.node)
                        .map(|seq| seq.iter().map(|f| f.to_vec()).collect())
                        .ok_or_else(|| Error::arg(format!("pedestrian {id} not in window")))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(STGraph {
                level: Level::Group,
                node_ids: g.clone(),
                features,
                adjacency: vec![complete_adjacency(g.len()); HISTORY_LEN],
            })
        })
        .collect()
}

/// Fully connected graph whose nodes are groups, with `embeddings[g][tick]` as features.
pub fn build_scene(embeddings: &[Vec<Vec<f64>>]) -> Result<STGraph> {
    let Some(first) = embeddings.first() else {
        return Err(Error::arg("scene graph needs at least one group"));
    };
    let ticks = first.len();
    let dim = first.first().map_or(0, Vec::len);
    for (g, e) in embeddings.iter().enumerate() {
        if e.len() != ticks || e.iter().any(|v| v.len() != dim) {
            return Err(Error::arg(format!("group {g} embedding shape differs")));
        }
    }
    let n = embeddings.len();
    Ok(STGraph {
        level: Level::Scene,
        node_ids: (0..n as PedId).collect(),
        features: embeddings.to_vec(),
        adjacency: vec![complete_adjacency(n); ticks],
    })
}
