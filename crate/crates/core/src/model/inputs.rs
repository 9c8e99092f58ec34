use serde::Serialize;

use crate::dataio::{future_relative, to_relative, Window};
use crate::error::{Error, Result};
use crate::grouping::{group_window, GroupAssignment};
use crate::nets::graph_tensors;
use crate::stgraph::{build_group, build_individual, build_scene, PerceptionConfig, STGraph};
use crate::tensor::Tensor;
use crate::{PedId, Point, FUTURE_LEN, HISTORY_LEN};

use super::{ModelConfig, FEATURE_DIM};

/// Ground truth used by the training objective.
#[derive(Debug, Clone)]
pub struct FutureTarget {
    /// `[FUTURE_LEN, 1, 4]` relative positions and velocities.
    pub features: Tensor,
    /// Future positions relative to the last observed position.
    pub positions: Vec<Point>,
}

/// Everything about a window that does not depend on the parameters: the
/// graphs, the grouping and the feature tensors.
#[derive(Debug, Clone)]
pub struct WindowInputs {
    pub node: PedId,
    pub last_position: Point,
    /// Velocity at the last observed step, in m/s.
    pub last_velocity: [f64; 2],
    /// `[HISTORY_LEN, 1, 4]`.
    pub history: Tensor,
    /// One `[HISTORY_LEN, 1, 4]` sequence per linked neighbour, zero at ticks
    /// where the neighbour is out of perception range.
    pub neighbors: Vec<Tensor>,
    pub individual: STGraph,
    pub assignment: GroupAssignment,
    /// Features `[T, n, 4]` and normalized adjacency `[T, n, n]` of each group graph.
    pub groups: Vec<(Tensor, Tensor)>,
    /// Index of the node's group in `assignment`.
    pub node_group: usize,
    /// Normalized `[T, G, G]` scene adjacency.
    pub scene_adjacency: Tensor,
    pub future: Option<FutureTarget>,
}

fn sequence(features: &[[f64; 4]]) -> Tensor {
    Tensor::new(
        vec![features.len(), 1, FEATURE_DIM],
        features.iter().flatten().copied().collect(),
    )
    .expect("feature shape")
}

/// Summary of a window's graphs for inspection tooling.
#[derive(Debug, Clone, Serialize)]
pub struct GraphDump<'a> {
    pub node: PedId,
    pub individual: &'a STGraph,
    pub groups: &'a GroupAssignment,
}

impl WindowInputs {
    /// Builds the graphs and tensors for `window`. The future is attached when
    /// the window carries a full ground-truth horizon.
    pub fn prepare(window: &Window, config: &ModelConfig) -> Result<Self> {
        if window.history.len() != HISTORY_LEN {
            return Err(Error::arg(format!(
                "window history has {} steps, expected {HISTORY_LEN}",
                window.history.len()
            )));
        }
        let perception = PerceptionConfig::new(config.radius)?;
        let individual = build_individual(window, &perception);
        let feats = to_relative(window);

        let me = 0;
        let mut neighbors = Vec::new();
        for (j, &id) in individual.node_ids.iter().enumerate().skip(1) {
            let linked: Vec<bool> = individual
                .adjacency
                .iter()
                .map(|a| a[me][j] > 0.0 || a[j][me] > 0.0)
                .collect();
            if !linked.iter().any(|&l| l) {
                continue;
            }
            let seq = feats.of(id, window.node).expect("neighbour features");
            let masked: Vec<[f64; 4]> = seq
                .iter()
                .zip(&linked)
                .map(|(f, &l)| if l { *f } else { [0.0; 4] })
                .collect();
            neighbors.push(sequence(&masked));
        }

        let assignment = group_window(window, &individual, config.linkage)?;
        let node_group = assignment
            .group_of(window.node)
            .ok_or_else(|| Error::State("node missing from its own grouping".into()))?;
        let groups = build_group(window, &assignment)?
            .iter()
            .map(graph_tensors)
            .collect::<Result<Vec<_>>>()?;
        let placeholder = vec![vec![vec![0.0; config.scene_dim]; HISTORY_LEN]; assignment.len()];
        let (_, scene_adjacency) = graph_tensors(&build_scene(&placeholder)?)?;

        let last = feats.node[HISTORY_LEN - 1];
        let future = (window.future.len() == FUTURE_LEN).then(|| {
            let f = future_relative(window);
            FutureTarget {
                features: sequence(&f),
                positions: f.iter().map(|v| [v[0], v[1]]).collect(),
            }
        });
        Ok(WindowInputs {
            node: window.node,
            last_position: window.last_position(),
            last_velocity: [last[2], last[3]],
            history: sequence(&feats.node),
            neighbors,
            individual,
            assignment,
            groups,
            node_group,
            scene_adjacency,
            future,
        })
    }

    pub fn graph_dump(&self) -> GraphDump<'_> {
        GraphDump {
            node: self.node,
            individual: &self.individual,
            groups: &self.assignment,
        }
    }
}
