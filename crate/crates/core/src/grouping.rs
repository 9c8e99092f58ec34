//! Pedestrian group detection and grouping quality.
//!
//! Trajectories are compared with the Hausdorff distance between their point
//! sets and merged bottom-up (complete linkage by default) until
//! `⌊(n + 1) / 2⌋` groups remain.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dataio::{Scene, Window};
use crate::error::{Error, Result};
use crate::stgraph::STGraph;
use crate::{PedId, Point, HISTORY_LEN};

/// A partition of pedestrian ids into groups.
///
/// Groups are kept in canonical order: members ascending, groups ordered by
/// their smallest member.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<PedId>>", into = "Vec<Vec<PedId>>")]
pub struct GroupAssignment {
    groups: Vec<Vec<PedId>>,
    group_of: BTreeMap<PedId, usize>,
}

impl GroupAssignment {
    pub fn from_groups(groups: Vec<Vec<PedId>>) -> Result<Self> {
        let mut groups: Vec<Vec<PedId>> = groups
            .into_iter()
            .map(|mut g| {
                g.sort_unstable();
                g
            })
            .collect();
        if groups.iter().any(|g| g.is_empty()) {
            return Err(Error::arg("empty group"));
        }
        groups.sort_by_key(|g| g[0]);
        let mut group_of = BTreeMap::new();
        for (gi, g) in groups.iter().enumerate() {
            for w in g.windows(2) {
                if w[0] == w[1] {
                    return Err(Error::arg(format!("id {} repeated in a group", w[0])));
                }
            }
            for &id in g {
                if group_of.insert(id, gi).is_some() {
                    return Err(Error::arg(format!("id {id} appears in two groups")));
                }
            }
        }
        Ok(GroupAssignment { groups, group_of })
    }

    pub fn groups(&self) -> &[Vec<PedId>] {
        &self.groups
    }

    pub fn group_of(&self, id: PedId) -> Option<usize> {
        self.group_of.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn ids(&self) -> BTreeSet<PedId> {
        self.group_of.keys().copied().collect()
    }

    /// Maps index-labelled groups (`0..n`) onto real ids.
    pub fn relabel(&self, ids: &[PedId]) -> Result<Self> {
        let groups = self
            .groups
            .iter()
            .map(|g| {
                g.iter()
                    .map(|&i| {
                        usize::try_from(i)
                            .ok()
                            .and_then(|i| ids.get(i).copied())
                            .ok_or_else(|| Error::arg(format!("index {i} out of range")))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_groups(groups)
    }
}

impl TryFrom<Vec<Vec<PedId>>> for GroupAssignment {
    type Error = Error;

    fn try_from(groups: Vec<Vec<PedId>>) -> Result<Self> {
        Self::from_groups(groups)
    }
}

impl From<GroupAssignment> for Vec<Vec<PedId>> {
    fn from(a: GroupAssignment) -> Self {
        a.groups
    }
}

fn dist(p: Point, q: Point) -> f64 {
    (p[0] - q[0]).hypot(p[1] - q[1])
}

fn directed_hausdorff(a: &[Point], b: &[Point]) -> f64 {
    a.iter()
        .map(|&p| b.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max)
}

/// Symmetric Hausdorff distance between two point sequences.
pub fn hausdorff(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::arg("hausdorff distance of an empty point sequence"));
    }
    Ok(directed_hausdorff(a, b).max(directed_hausdorff(b, a)))
}

/// Number of groups to form for `n` pedestrians: `⌊(n + 1) / 2⌋`.
pub fn cluster_count(n: usize) -> Result<usize> {
    if n == 0 {
        return Err(Error::arg("cluster count of zero nodes"));
    }
    Ok((n + 1) / 2)
}

/// Symmetric, zero-diagonal matrix of finite nonnegative distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    d: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(n: usize, d: Vec<f64>) -> Result<Self> {
        if d.len() != n * n {
            return Err(Error::arg(format!("{} entries for a {n}x{n} matrix", d.len())));
        }
        for i in 0..n {
            if d[i * n + i] != 0.0 {
                return Err(Error::arg("nonzero diagonal"));
            }
            for j in 0..n {
                let v = d[i * n + j];
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::arg(format!("invalid distance {v} at ({i}, {j})")));
                }
                if v != d[j * n + i] {
                    return Err(Error::arg(format!("asymmetric entry at ({i}, {j})")));
                }
            }
        }
        Ok(DistanceMatrix { n, d })
    }

    /// Pairwise Hausdorff distances between trajectories.
    pub fn hausdorff(trajectories: &[Vec<Point>]) -> Result<Self> {
        let n = trajectories.len();
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let v = hausdorff(&trajectories[i], &trajectories[j])?;
                d[i * n + j] = v;
                d[j * n + i] = v;
            }
        }
        Self::new(n, d)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }
}

/// Distance between two clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linkage {
    /// Largest pairwise distance.
    #[default]
    Complete,
    /// Smallest pairwise distance.
    Single,
    /// Mean pairwise distance.
    Average,
}

impl Linkage {
    fn between(self, dm: &DistanceMatrix, a: &[usize], b: &[usize]) -> f64 {
        let pairs = a.iter().flat_map(|&i| b.iter().map(move |&j| dm.get(i, j)));
        match self {
            Linkage::Complete => pairs.fold(0.0, f64::max),
            Linkage::Single => pairs.fold(f64::INFINITY, f64::min),
            Linkage::Average => pairs.sum::<f64>() / (a.len() * b.len()) as f64,
        }
    }
}

/// Merges singletons bottom-up until `c` clusters remain.
///
/// Groups in the result are labelled by matrix index. Among equally close
/// cluster pairs the lexicographically smallest pair of cluster positions is
/// merged, where clusters are ordered by their smallest member.
pub fn agglomerate(dm: &DistanceMatrix, c: usize, linkage: Linkage) -> Result<GroupAssignment> {
    let n = dm.len();
    if c == 0 || c > n {
        return Err(Error::arg(format!("cannot form {c} clusters from {n} items")));
    }
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    // linkage[a][b] for cluster positions a < b, kept in sync with `clusters`.
    let mut link: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| dm.get(i, j)).collect())
        .collect();
    while clusters.len() > c {
        let mut best = (0, 1, f64::INFINITY);
        for a in 0..clusters.len() {
            for b in (a + 1)..clusters.len() {
                if link[a][b] < best.2 {
                    best = (a, b, link[a][b]);
                }
            }
        }
        let (a, b, _) = best;
        let absorbed = clusters.remove(b);
        clusters[a].extend(absorbed);
        clusters[a].sort_unstable();
        link.remove(b);
        for row in &mut link {
            row.remove(b);
        }
        for k in 0..clusters.len() {
            if k != a {
                let v = linkage.between(dm, &clusters[a], &clusters[k]);
                link[a][k] = v;
                link[k][a] = v;
            }
        }
    }
    GroupAssignment::from_groups(
        clusters
            .into_iter()
            .map(|g| g.into_iter().map(|i| i as PedId).collect())
            .collect(),
    )
}

/// The current node plus every node with an edge to or from it at any tick.
pub fn scope_nodes(window: &Window, graph: &STGraph) -> Vec<PedId> {
    let Some(me) = graph.node_ids.iter().position(|&id| id == window.node) else {
        return vec![window.node];
    };
    let mut scoped = vec![window.node];
    for (v, &id) in graph.node_ids.iter().enumerate() {
        if v == me {
            continue;
        }
        let linked = graph
            .adjacency
            .iter()
            .any(|a| a[v][me] > 0.0 || a[me][v] > 0.0);
        if linked {
            scoped.push(id);
        }
    }
    scoped
}

/// Clusters the given trajectories into `cluster_count(n)` groups keyed by `ids`.
pub fn cluster_trajectories(
    ids: &[PedId],
    trajectories: &[Vec<Point>],
    linkage: Linkage,
) -> Result<GroupAssignment> {
    if ids.len() != trajectories.len() {
        return Err(Error::arg("ids and trajectories differ in length"));
    }
    let dm = DistanceMatrix::hausdorff(trajectories)?;
    let c = cluster_count(ids.len())?;
    agglomerate(&dm, c, linkage)?.relabel(ids)
}

/// Groups the scoped nodes of a window by their observed history.
pub fn group_window(window: &Window, graph: &STGraph, linkage: Linkage) -> Result<GroupAssignment> {
    let ids = scope_nodes(window, graph);
    let trajectories: Vec<Vec<Point>> = ids
        .iter()
        .map(|&id| {
            window
                .history_of(id)
                .map(|h| h.into_iter().flatten().collect())
                .ok_or_else(|| Error::arg(format!("pedestrian {id} not in window")))
        })
        .collect::<Result<_>>()?;
    cluster_trajectories(&ids, &trajectories, linkage)
}

/// Groups every pedestrian present at `tick`, comparing the trailing history up to that tick.
pub fn group_scene_tick(scene: &Scene, tick: usize, linkage: Linkage) -> Result<GroupAssignment> {
    let ids = scene.present(tick);
    if ids.is_empty() {
        return Err(Error::arg(format!("no pedestrians present at tick {tick}")));
    }
    let first = (tick + 1).saturating_sub(HISTORY_LEN);
    let trajectories: Vec<Vec<Point>> = ids
        .iter()
        .map(|id| {
            let t = &scene.tracks[id];
            (first..=tick).filter_map(|k| t.at(k)).collect()
        })
        .collect();
    cluster_trajectories(&ids, &trajectories, linkage)
}

/// Average Sørensen–Dice agreement between algorithm groupings and human annotations.
///
/// `human[t]` holds one grouping per annotator for timestep `t`. Groups count as
/// shared only when they contain exactly the same ids.
pub fn dice(algo: &[GroupAssignment], human: &[Vec<GroupAssignment>]) -> Result<f64> {
    if algo.len() != human.len() {
        return Err(Error::arg(format!(
            "{} algorithm timesteps vs {} annotated timesteps",
            algo.len(),
            human.len()
        )));
    }
    if algo.is_empty() {
        return Err(Error::arg("no timesteps to score"));
    }
    let mut total = 0.0;
    for (t, (a, annotators)) in algo.iter().zip(human).enumerate() {
        if annotators.is_empty() {
            return Err(Error::arg(format!("timestep {t} has no annotators")));
        }
        let ids = a.ids();
        let a_groups: BTreeSet<&Vec<PedId>> = a.groups().iter().collect();
        let mut per_t = 0.0;
        for h in annotators {
            if h.ids() != ids {
                return Err(Error::arg(format!(
                    "annotation at timestep {t} covers different ids than the algorithm output"
                )));
            }
            let shared = h.groups().iter().filter(|g| a_groups.contains(g)).count();
            per_t += 2.0 * shared as f64 / (h.len() + a.len()) as f64;
        }
        total += per_t / annotators.len() as f64;
    }
    Ok(total / algo.len() as f64)
}

/// Parses an annotation file: timesteps → annotators → groups of ids.
pub fn parse_annotations(json: &str) -> Result<Vec<Vec<GroupAssignment>>> {
    Ok(serde_json::from_str(json)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ga(groups: &[&[PedId]]) -> GroupAssignment {
        GroupAssignment::from_groups(groups.iter().map(|g| g.to_vec()).collect()).unwrap()
    }

    #[test]
    fn hausdorff_examples() {
        let a = [[0.0, 0.0], [1.0, 0.0]];
        assert_eq!(hausdorff(&a, &a).unwrap(), 0.0);
        assert_eq!(hausdorff(&[[0.0, 0.0]], &[[3.0, 4.0]]).unwrap(), 5.0);
        // Exhaustive: from a, min distances are 1 and sqrt(2); from b, 1.
        assert_eq!(hausdorff(&a, &[[0.0, 1.0]]).unwrap(), 2f64.sqrt());
        assert!(hausdorff(&[], &a).is_err());
    }

    #[test]
    fn cluster_count_floor() {
        let got: Vec<usize> = (1..=10).map(|n| cluster_count(n).unwrap()).collect();
        assert_eq!(got, vec![1, 1, 2, 2, 3, 3, 4, 4, 5, 5]);
        assert!(cluster_count(0).is_err());
    }

    fn matrix(n: usize, f: impl Fn(usize, usize) -> f64) -> DistanceMatrix {
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    d[i * n + j] = f(i.min(j), i.max(j));
                }
            }
        }
        DistanceMatrix::new(n, d).unwrap()
    }

    #[test]
    fn agglomerate_examples() {
        let dm = matrix(3, |_, _| 1.0);
        assert_eq!(agglomerate(&dm, 3, Linkage::Complete).unwrap(), ga(&[&[0], &[1], &[2]]));
        let dm = matrix(2, |_, _| 7.0);
        assert_eq!(agglomerate(&dm, 1, Linkage::Complete).unwrap(), ga(&[&[0, 1]]));
        let dm = matrix(4, |i, j| if (i, j) == (0, 1) || (i, j) == (2, 3) { 1.0 } else { 10.0 + (i + j) as f64 });
        assert_eq!(agglomerate(&dm, 2, Linkage::Complete).unwrap(), ga(&[&[0, 1], &[2, 3]]));
        assert!(agglomerate(&dm, 0, Linkage::Complete).is_err());
        assert!(agglomerate(&dm, 5, Linkage::Complete).is_err());
    }

    #[test]
    fn ties_merge_smallest_pair() {
        let dm = matrix(4, |_, _| 2.0);
        assert_eq!(agglomerate(&dm, 3, Linkage::Complete).unwrap(), ga(&[&[0, 1], &[2], &[3]]));
        assert_eq!(agglomerate(&dm, 2, Linkage::Complete).unwrap(), ga(&[&[0, 1, 2], &[3]]));
    }

    #[test]
    fn single_and_average_linkage_chain() {
        // A chain 0-1-2 with a far point 3: single linkage keeps the chain together.
        let dm = matrix(4, |i, j| match (i, j) {
            (0, 1) | (1, 2) => 1.0,
            (0, 2) => 2.0,
            _ => 1.5 + j as f64,
        });
        assert_eq!(agglomerate(&dm, 2, Linkage::Single).unwrap(), ga(&[&[0, 1, 2], &[3]]));
        assert_eq!(agglomerate(&dm, 2, Linkage::Average).unwrap(), ga(&[&[0, 1, 2], &[3]]));
    }

    #[test]
    fn dice_examples() {
        let x = vec![ga(&[&[1], &[2, 3]]), ga(&[&[1, 2, 3]])];
        let hx: Vec<Vec<GroupAssignment>> = x.iter().map(|g| vec![g.clone(), g.clone()]).collect();
        assert_eq!(dice(&x, &hx).unwrap(), 1.0);

        let none = dice(&[ga(&[&[1, 2], &[3]])], &[vec![ga(&[&[1], &[2, 3]])]]).unwrap();
        assert_eq!(none, 0.0);

        let v = dice(&[ga(&[&[1], &[2, 3]])], &[vec![ga(&[&[1], &[2], &[3]])]]).unwrap();
        assert!((v - 0.4).abs() < 1e-12);

        let mismatch = dice(&[ga(&[&[1], &[2]])], &[vec![ga(&[&[1], &[3]])]]);
        assert!(mismatch.is_err());
    }

    #[test]
    fn annotation_file_format() {
        let h = parse_annotations("[[[[1],[2,3]],[[1,2,3]]],[[[4,5]]]]").unwrap();
        assert_eq!(h.len(), 2);
        assert_eq!(h[0].len(), 2);
        assert_eq!(h[0][1], ga(&[&[1, 2, 3]]));
        assert!(parse_annotations("[[[[1],[1]]]]").is_err());
    }

    fn points() -> impl Strategy<Value = Vec<Point>> {
        prop::collection::vec((-10.0..10.0f64, -10.0..10.0f64).prop_map(|(x, y)| [x, y]), 1..8)
    }

    proptest! {
        #[test]
        fn hausdorff_is_a_set_metric(a in points(), b in points(), c in points()) {
            let ab = hausdorff(&a, &b).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, hausdorff(&b, &a).unwrap());
            let ac = hausdorff(&a, &c).unwrap();
            let cb = hausdorff(&c, &b).unwrap();
            prop_assert!(ab <= ac + cb + 1e-12);
            let mut ra = a.clone();
            ra.reverse();
            prop_assert_eq!(hausdorff(&ra, &b).unwrap(), ab);
            prop_assert_eq!(hausdorff(&a, &a).unwrap(), 0.0);
        }

        #[test]
        fn cluster_count_in_range(n in 1usize..10_000) {
            let c = cluster_count(n).unwrap();
            prop_assert!(c >= 1 && c <= n);
        }

        #[test]
        fn scaling_preserves_partition(trajs in prop::collection::vec(points(), 1..7), lambda in 0.1..10.0f64) {
            let ids: Vec<PedId> = (0..trajs.len() as PedId).collect();
            let scaled: Vec<Vec<Point>> = trajs
                .iter()
                .map(|t| t.iter().map(|p| [p[0] * lambda, p[1] * lambda]).collect())
                .collect();
            for i in 0..trajs.len() {
                for j in 0..trajs.len() {
                    let d = hausdorff(&trajs[i], &trajs[j]).unwrap();
                    let ds = hausdorff(&scaled[i], &scaled[j]).unwrap();
                    prop_assert!((ds - lambda * d).abs() <= 1e-9 * (1.0 + ds));
                }
            }
            let a = cluster_trajectories(&ids, &trajs, Linkage::Complete).unwrap();
            let b = cluster_trajectories(&ids, &scaled, Linkage::Complete).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn merges_are_nested(trajs in prop::collection::vec(points(), 2..8)) {
            let dm = DistanceMatrix::hausdorff(&trajs).unwrap();
            for c in 2..=trajs.len() {
                let fine = agglomerate(&dm, c, Linkage::Complete).unwrap();
                let coarse = agglomerate(&dm, c - 1, Linkage::Complete).unwrap();
                for g in fine.groups() {
                    let target = coarse.group_of(g[0]).unwrap();
                    prop_assert!(g.iter().all(|&id| coarse.group_of(id) == Some(target)));
                }
            }
        }

        #[test]
        fn dice_bounded_and_reflexive(sizes in prop::collection::vec(1usize..4, 1..6), cut in 0usize..6) {
            let mut next = 0;
            let groups: Vec<Vec<PedId>> = sizes
                .iter()
                .map(|&s| { let g = (next..next + s as PedId).collect(); next += s as PedId; g })
                .collect();
            let a = GroupAssignment::from_groups(groups).unwrap();
            prop_assert_eq!(dice(&[a.clone()], &[vec![a.clone()]]).unwrap(), 1.0);
            let all: Vec<PedId> = (0..next).collect();
            let split = cut.min(all.len() - 1);
            let mut other = vec![all[..=split].to_vec()];
            if split + 1 < all.len() {
                other.push(all[split + 1..].to_vec());
            }
            let b = GroupAssignment::from_groups(other).unwrap();
            let v = dice(&[a], &[vec![b]]).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
