//! Embedded-deformation warp field.
//!
//! Node `i` at canonical position `pᵢ` carries `(Rᵢ, tᵢ)` acting about its
//! own position: `x ↦ Rᵢ(x − pᵢ) + pᵢ + tᵢ`. The warped node itself lands at
//! `pᵢ + tᵢ`. Surface vertices blend the node maps with convex weights.

use thiserror::Error;

use crate::geom::{Motion3, Point3, RigidTransform};
use crate::pyramid::NodeGraph;

/// Default number of skinning anchors per vertex.
pub const DEFAULT_ANCHORS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WarpError {
    #[error("graph is empty")]
    EmptyGraph,
    #[error("warp fields are defined on different graphs")]
    GraphMismatch,
    #[error("{transforms} transforms for {nodes} nodes")]
    CountMismatch { nodes: usize, transforms: usize },
    #[error("invalid skinning parameters: {0}")]
    InvalidParams(String),
    #[error("invalid transform at node {0}")]
    InvalidTransform(usize),
}

/// A canonical vertex bound to its anchor nodes with convex weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SkinnedVertex {
    pub position: Point3,
    pub anchors: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarpField {
    pub graph: NodeGraph,
    pub transforms: Vec<RigidTransform>,
}

impl WarpField {
    pub fn new(graph: NodeGraph, transforms: Vec<RigidTransform>) -> Result<Self, WarpError> {
        if graph.len() != transforms.len() {
            return Err(WarpError::CountMismatch {
                nodes: graph.len(),
                transforms: transforms.len(),
            });
        }
        if let Some(i) = transforms.iter().position(|t| !t.is_valid()) {
            return Err(WarpError::InvalidTransform(i));
        }
        Ok(Self { graph, transforms })
    }

    pub fn identity(graph: NodeGraph) -> Self {
        let n = graph.len();
        Self {
            graph,
            transforms: vec![RigidTransform::identity(); n],
        }
    }

    /// Node transforms that reproduce the world-space rigid map `global`.
    pub fn from_global(graph: NodeGraph, global: &RigidTransform) -> Self {
        let transforms = graph
            .positions
            .iter()
            .map(|p| node_local(global, p))
            .collect();
        Self { graph, transforms }
    }

    pub fn len(&self) -> usize {
        self.graph.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graph.is_empty()
    }

    /// Node `i`'s map applied to `x`.
    #[inline]
    pub fn apply_node(&self, i: usize, x: &Point3) -> Point3 {
        apply_about(&self.transforms[i], &self.graph.positions[i], x)
    }

    /// Warped position of node `i`.
    #[inline]
    pub fn node_position(&self, i: usize) -> Point3 {
        self.graph.positions[i] + self.transforms[i].translation
    }

    pub fn node_positions(&self) -> Vec<Point3> {
        (0..self.len()).map(|i| self.node_position(i)).collect()
    }

    /// Applies the world-space rigid map `global` after this field.
    pub fn then_global(&self, global: &RigidTransform) -> WarpField {
        let transforms = self
            .transforms
            .iter()
            .zip(&self.graph.positions)
            .map(|(t, p)| {
                RigidTransform {
                    rotation: global.rotation * t.rotation,
                    translation: global.rotation * (p + t.translation) + global.translation - p,
                }
            })
            .collect();
        WarpField {
            graph: self.graph.clone(),
            transforms,
        }
    }

    pub fn same_graph(&self, other: &WarpField) -> bool {
        self.graph.positions == other.graph.positions
    }
}

/// `R(x − p) + p + t`.
#[inline]
pub fn apply_about(t: &RigidTransform, p: &Point3, x: &Point3) -> Point3 {
    t.rotation * (x - p) + p + t.translation
}

/// Node-local form of a world-space rigid map for a node at `p`.
pub fn node_local(global: &RigidTransform, p: &Point3) -> RigidTransform {
    RigidTransform {
        rotation: global.rotation,
        translation: global.apply(p) - p,
    }
}

/// Binds each vertex to its `k` nearest nodes with weights
/// `max(0, 1 − d²/r²)²`, normalized to sum to one. A vertex out of reach of
/// every anchor falls back to its nearest node.
pub fn skin_vertices(
    vertices: &[Point3],
    graph: &NodeGraph,
    k: usize,
    radius: f64,
) -> Result<Vec<SkinnedVertex>, WarpError> {
    if graph.is_empty() {
        return Err(WarpError::EmptyGraph);
    }
    if k == 0 {
        return Err(WarpError::InvalidParams("k must be at least 1".into()));
    }
    if !(radius > 0.0) {
        return Err(WarpError::InvalidParams("radius must be positive".into()));
    }
    let k = k.min(graph.len());
    let r2 = radius * radius;
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(graph.len());
    let out = vertices
        .iter()
        .map(|v| {
            cand.clear();
            cand.extend(
                graph
                    .positions
                    .iter()
                    .enumerate()
                    .map(|(i, p)| ((p - v).norm_squared(), i)),
            );
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < cand.len() {
                cand.select_nth_unstable_by(k - 1, cmp);
                cand.truncate(k);
            }
            cand.sort_by(cmp);
            let raw: Vec<f64> = cand
                .iter()
                .map(|(d2, _)| {
                    let s = (1.0 - d2 / r2).max(0.0);
                    s * s
                })
                .collect();
            let total: f64 = raw.iter().sum();
            let anchors = if total > 0.0 {
                cand.iter()
                    .zip(&raw)
                    .map(|((_, i), w)| (*i, w / total))
                    .collect()
            } else {
                vec![(cand[0].1, 1.0)]
            };
            SkinnedVertex {
                position: *v,
                anchors,
            }
        })
        .collect();
    Ok(out)
}

/// `v′ = Σ wᵢ [Rᵢ(v − pᵢ) + pᵢ + tᵢ]`.
pub fn warp_point(field: &WarpField, sv: &SkinnedVertex) -> Point3 {
    sv.anchors
        .iter()
        .fold(Point3::zeros(), |acc, (i, w)| acc + field.apply_node(*i, &sv.position) * *w)
}

pub fn warp_points(field: &WarpField, vertices: &[SkinnedVertex]) -> Vec<Point3> {
    vertices.iter().map(|sv| warp_point(field, sv)).collect()
}

/// Per-node displacement from `prev` to `cur`.
pub fn node_displacements(prev: &WarpField, cur: &WarpField) -> Result<Vec<Motion3>, WarpError> {
    if !prev.same_graph(cur) || prev.transforms.len() != cur.transforms.len() {
        return Err(WarpError::GraphMismatch);
    }
    Ok((0..cur.len())
        .map(|i| cur.node_position(i) - prev.node_position(i))
        .collect())
}
