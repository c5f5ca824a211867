//! Node sampling and the four-level graph pyramid.
//!
//! Level 0 holds every node with k-nearest-neighbor edges. Each coarser level
//! is a greedy subsample of the level below at a larger interval, with edges
//! found by breadth-first search through the finer graph.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Point3;

pub const LEVELS: usize = 4;

/// Default node spacing per level, in centimeters.
pub const NODE_INTERVALS_CM: [f64; LEVELS] = [4.0, 8.0, 16.0, 32.0];
pub const NEIGHBOR_COUNTS: [usize; LEVELS] = [8, 6, 4, 3];
/// Maximum change of an edge's length before it is dropped, centimeters.
pub const PRUNE_THRESHOLD_CM: f64 = 4.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PyramidError {
    #[error("empty input")]
    EmptyInput,
    #[error("interval must be positive, got {0}")]
    InvalidInterval(f64),
    #[error("level {0} would be empty")]
    InsufficientNodes(usize),
    #[error("feature count {got} does not match node count {expected}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("level {0} out of range")]
    LevelOutOfRange(usize),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PyramidConfig {
    pub intervals: [f64; LEVELS],
    pub neighbor_counts: [usize; LEVELS],
    pub prune_threshold: f64,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            intervals: NODE_INTERVALS_CM.map(|cm| cm * 0.01),
            neighbor_counts: NEIGHBOR_COUNTS,
            prune_threshold: PRUNE_THRESHOLD_CM * 0.01,
        }
    }
}

/// Node positions with directed out-neighbor lists.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeGraph {
    pub positions: Vec<Point3>,
    pub edges: Vec<Vec<usize>>,
}

impl NodeGraph {
    pub fn new(positions: Vec<Point3>, edges: Vec<Vec<usize>>) -> Result<Self, PyramidError> {
        let g = Self { positions, edges };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), PyramidError> {
        if self.edges.len() != self.positions.len() {
            return Err(PyramidError::InvalidGraph(format!(
                "{} adjacency lists for {} nodes",
                self.edges.len(),
                self.positions.len()
            )));
        }
        let n = self.positions.len();
        for (i, nbrs) in self.edges.iter().enumerate() {
            for &j in nbrs {
                if j == i {
                    return Err(PyramidError::InvalidGraph(format!("self-edge at {i}")));
                }
                if j >= n {
                    return Err(PyramidError::InvalidGraph(format!("edge {i}->{j} out of range")));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }

    /// Directed edges `(j, i)` for `i ∈ N_j`.
    pub fn directed_edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges
            .iter()
            .enumerate()
            .flat_map(|(j, n)| n.iter().map(move |&i| (j, i)))
    }

    /// Undirected adjacency, sorted and deduplicated.
    pub fn symmetric_adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.len()];
        for (j, i) in self.directed_edges() {
            adj[j].push(i);
            adj[i].push(j);
        }
        for a in adj.iter_mut() {
            a.sort_unstable();
            a.dedup();
        }
        adj
    }

    /// Breadth-first hop distance from any node in `sources`; `None` when
    /// unreachable.
    pub fn hop_distances(&self, sources: impl IntoIterator<Item = usize>) -> Vec<Option<usize>> {
        let adj = self.symmetric_adjacency();
        let mut dist = vec![None; self.len()];
        let mut frontier: Vec<usize> = Vec::new();
        for s in sources {
            if dist[s].is_none() {
                dist[s] = Some(0);
                frontier.push(s);
            }
        }
        let mut depth = 0;
        while !frontier.is_empty() {
            depth += 1;
            let mut next = Vec::new();
            for v in frontier {
                for &w in &adj[v] {
                    if dist[w].is_none() {
                        dist[w] = Some(depth);
                        next.push(w);
                    }
                }
            }
            frontier = next;
        }
        dist
    }
}

/// Uniform hash grid for radius queries.
struct Grid {
    cell: f64,
    cells: HashMap<(i64, i64, i64), Vec<usize>>,
}

impl Grid {
    fn new(cell: f64) -> Self {
        Self {
            cell,
            cells: HashMap::new(),
        }
    }

    fn key(&self, p: &Point3) -> (i64, i64, i64) {
        (
            (p.x / self.cell).floor() as i64,
            (p.y / self.cell).floor() as i64,
            (p.z / self.cell).floor() as i64,
        )
    }

    fn insert(&mut self, p: &Point3, id: usize) {
        let k = self.key(p);
        self.cells.entry(k).or_default().push(id);
    }

    fn any_within(&self, p: &Point3, r2: f64, points: &[Point3]) -> bool {
        let (x, y, z) = self.key(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(ids) = self.cells.get(&(x + dx, y + dy, z + dz)) {
                        if ids.iter().any(|&i| (points[i] - p).norm_squared() < r2) {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }
}

/// Greedy cover in input order: a point becomes a node unless an already
/// selected node lies strictly closer than `interval`.
pub fn sample_nodes(points: &[Point3], interval: f64) -> Result<Vec<usize>, PyramidError> {
    if points.is_empty() {
        return Err(PyramidError::EmptyInput);
    }
    if !(interval > 0.0) || !interval.is_finite() {
        return Err(PyramidError::InvalidInterval(interval));
    }
    let r2 = interval * interval;
    let mut grid = Grid::new(interval);
    let mut selected = Vec::new();
    for (i, p) in points.iter().enumerate() {
        if !grid.any_within(p, r2, points) {
            grid.insert(p, i);
            selected.push(i);
        }
    }
    Ok(selected)
}

/// `k` nearest neighbors of every node, ties broken by lower index.
pub fn knn_edges(positions: &[Point3], k: usize) -> Vec<Vec<usize>> {
    let n = positions.len();
    let mut out = Vec::with_capacity(n);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for (i, p) in positions.iter().enumerate() {
        cand.clear();
        cand.extend(
            positions
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(j, q)| ((q - p).norm_squared(), j)),
        );
        let k = k.min(cand.len());
        if k > 0 && k < cand.len() {
            cand.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cand.truncate(k);
        }
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.push(cand.iter().take(k).map(|c| c.1).collect());
    }
    out
}

/// Drops edges whose length changes by more than `threshold` relative to the
/// first frame of `trajectories` (indexed `[frame][node]`).
pub fn prune_edges_temporal(
    graph: &NodeGraph,
    trajectories: &[Vec<Point3>],
    threshold: f64,
) -> NodeGraph {
    if trajectories.len() < 2 {
        return graph.clone();
    }
    let reference = &trajectories[0];
    let edges = graph
        .edges
        .iter()
        .enumerate()
        .map(|(j, nbrs)| {
            nbrs.iter()
                .copied()
                .filter(|&i| {
                    let d0 = (reference[i] - reference[j]).norm();
                    trajectories[1..]
                        .iter()
                        .all(|frame| ((frame[i] - frame[j]).norm() - d0).abs() <= threshold)
                })
                .collect()
        })
        .collect();
    NodeGraph {
        positions: graph.positions.clone(),
        edges,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphPyramid {
    /// `levels[0]` is the finest graph.
    pub levels: Vec<NodeGraph>,
    /// `subset_maps[l][c]`: index at level `l` of node `c` of level `l + 1`.
    pub subset_maps: Vec<Vec<usize>>,
    /// `upsample_maps[l][f]`: nearest level-`l + 1` node of level-`l` node `f`.
    pub upsample_maps: Vec<Vec<usize>>,
}

/// Samples level-0 nodes from surface points and builds the pyramid.
/// Returns the pyramid and, for each level-0 node, its surface point index.
pub fn build_pyramid(
    surface_points: &[Point3],
    config: &PyramidConfig,
) -> Result<(GraphPyramid, Vec<usize>), PyramidError> {
    let picked = sample_nodes(surface_points, config.intervals[0])?;
    let nodes: Vec<Point3> = picked.iter().map(|&i| surface_points[i]).collect();
    let pyramid = GraphPyramid::from_nodes(nodes, config, None)?;
    Ok((pyramid, picked))
}

impl GraphPyramid {
    /// Builds a pyramid whose finest level is exactly `nodes`. Level-0 edges
    /// are pruned against `trajectories` (`[frame][node]`) when given.
    pub fn from_nodes(
        nodes: Vec<Point3>,
        config: &PyramidConfig,
        trajectories: Option<&[Vec<Point3>]>,
    ) -> Result<Self, PyramidError> {
        if nodes.is_empty() {
            return Err(PyramidError::InsufficientNodes(0));
        }
        let edges = knn_edges(&nodes, config.neighbor_counts[0]);
        let mut base = NodeGraph {
            positions: nodes,
            edges,
        };
        if let Some(traj) = trajectories {
            base = prune_edges_temporal(&base, traj, config.prune_threshold);
        }
        Self::from_level0(base, config)
    }

    /// Builds the coarser levels on top of a given finest graph.
    pub fn from_level0(base: NodeGraph, config: &PyramidConfig) -> Result<Self, PyramidError> {
        base.validate()?;
        if base.is_empty() {
            return Err(PyramidError::InsufficientNodes(0));
        }
        let mut levels = vec![base];
        let mut subset_maps = Vec::new();
        let mut upsample_maps = Vec::new();
        for l in 1..LEVELS {
            let fine = &levels[l - 1];
            let subset = sample_nodes(&fine.positions, config.intervals[l])?;
            if subset.is_empty() {
                return Err(PyramidError::InsufficientNodes(l));
            }
            let positions: Vec<Point3> = subset.iter().map(|&i| fine.positions[i]).collect();
            let edges = bfs_edges(fine, &subset, config.neighbor_counts[l]);
            let upsample = nearest_indices(&fine.positions, &positions);
            levels.push(NodeGraph { positions, edges });
            subset_maps.push(subset);
            upsample_maps.push(upsample);
        }
        Ok(Self {
            levels,
            subset_maps,
            upsample_maps,
        })
    }

    pub fn level(&self, l: usize) -> &NodeGraph {
        &self.levels[l]
    }

    /// Copies level-`level` features onto the nodes of level `level + 1`.
    pub fn downsample_features<T: Clone>(
        &self,
        level: usize,
        features: &[T],
    ) -> Result<Vec<T>, PyramidError> {
        let map = self
            .subset_maps
            .get(level)
            .ok_or(PyramidError::LevelOutOfRange(level))?;
        let expected = self.levels[level].len();
        if features.len() != expected {
            return Err(PyramidError::SizeMismatch {
                expected,
                got: features.len(),
            });
        }
        Ok(map.iter().map(|&i| features[i].clone()).collect())
    }

    /// Assigns each level-`coarse_level − 1` node the feature of its nearest
    /// level-`coarse_level` node.
    pub fn upsample_features<T: Clone>(
        &self,
        coarse_level: usize,
        features: &[T],
    ) -> Result<Vec<T>, PyramidError> {
        if coarse_level == 0 || coarse_level >= LEVELS {
            return Err(PyramidError::LevelOutOfRange(coarse_level));
        }
        let expected = self.levels[coarse_level].len();
        if features.len() != expected {
            return Err(PyramidError::SizeMismatch {
                expected,
                got: features.len(),
            });
        }
        Ok(self.upsample_maps[coarse_level - 1]
            .iter()
            .map(|&c| features[c].clone())
            .collect())
    }
}

/// Neighbors of each coarse node: the first `k` coarse members reached by a
/// layered BFS through `fine`, each layer visited in index order.
fn bfs_edges(fine: &NodeGraph, subset: &[usize], k: usize) -> Vec<Vec<usize>> {
    let adj = fine.symmetric_adjacency();
    let mut coarse_of = vec![usize::MAX; fine.len()];
    for (c, &f) in subset.iter().enumerate() {
        coarse_of[f] = c;
    }
    let mut seen = vec![u32::MAX; fine.len()];
    subset
        .iter()
        .enumerate()
        .map(|(c, &root)| {
            let stamp = c as u32;
            let mut out = Vec::with_capacity(k);
            let mut frontier = vec![root];
            seen[root] = stamp;
            while !frontier.is_empty() && out.len() < k {
                let mut next = Vec::new();
                for &v in &frontier {
                    for &w in &adj[v] {
                        if seen[w] != stamp {
                            seen[w] = stamp;
                            next.push(w);
                        }
                    }
                }
                next.sort_unstable();
                for &w in &next {
                    if coarse_of[w] != usize::MAX && out.len() < k {
                        out.push(coarse_of[w]);
                    }
                }
                frontier = next;
            }
            out
        })
        .collect()
}

/// For each query, the index of the nearest target (lowest index on ties).
fn nearest_indices(queries: &[Point3], targets: &[Point3]) -> Vec<usize> {
    queries
        .iter()
        .map(|q| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (i, t) in targets.iter().enumerate() {
                let d = (t - q).norm_squared();
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            best
        })
        .collect()
}
