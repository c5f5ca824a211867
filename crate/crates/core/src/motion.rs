//! Motion prediction for occluded nodes.
//!
//! Visible nodes carry observed displacements; occluded ones are filled in
//! by a global rigid fit, by an as-rigid-as-possible deformation of the node
//! graph, or by an external predictor whose outputs are read from file.

use std::fmt;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3x6, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::{motion_weight, truncate_sigma, WeightParams};
use crate::geom::{rigid_fit, skew, Motion3, Point3, RigidTransform};
use crate::io::{read_json, write_json, IoError};
use crate::pyramid::{GraphPyramid, NodeGraph};
use crate::solver::{minimize, LmParams, NodeProblem, NormalEquations, SolverError};
use crate::warpfield::node_local;

pub const CSV_HEADER: &str = "node_id,mu_x,mu_y,mu_z,sigma";

#[derive(Debug, Error)]
pub enum MotionError {
    #[error("{what}: expected {expected}, got {got}")]
    CountMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("negative sigma at node {node}")]
    NegativeSigma { node: usize },
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Per-node visibility flags.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VisibilityMask(pub Vec<bool>);

impl VisibilityMask {
    pub fn all_visible(n: usize) -> Self {
        Self(vec![true; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn is_visible(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.0[i]).collect()
    }

    pub fn occluded_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.0[i]).collect()
    }

    pub fn visible_count(&self) -> usize {
        self.0.iter().filter(|v| **v).count()
    }
}

/// Isotropic Gaussian over a node displacement, in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianMotion {
    pub mu: Motion3,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictionSource {
    Rigid,
    Arap,
    ArapRefined,
    External,
}

impl fmt::Display for PredictionSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PredictionSource::Rigid => "rigid",
            PredictionSource::Arap => "arap",
            PredictionSource::ArapRefined => "arap-refined",
            PredictionSource::External => "external",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionPrediction {
    pub motions: Vec<GaussianMotion>,
    pub source: PredictionSource,
    /// The rigid component fell back to a pure translation.
    pub translation_only: bool,
    /// Occluded nodes with no graph path to a visible node; they carry the
    /// rigid prediction.
    pub unreachable: Vec<usize>,
}

impl MotionPrediction {
    pub fn new(motions: Vec<GaussianMotion>, source: PredictionSource) -> Self {
        Self {
            motions,
            source,
            translation_only: false,
            unreachable: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.motions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.motions.is_empty()
    }

    pub fn mus(&self) -> Vec<Motion3> {
        self.motions.iter().map(|g| g.mu).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArapParams {
    pub lambda_anchor: f64,
    pub solver: LmParams,
    /// Smallest σ handed out, in meters.
    pub sigma_min: f64,
    /// σ of rigidly predicted occluded nodes and cap on graph-scaled σ.
    pub sigma_default: f64,
    pub weight: WeightParams,
}

impl Default for ArapParams {
    fn default() -> Self {
        Self {
            lambda_anchor: 100.0,
            solver: LmParams::default(),
            sigma_min: 0.001,
            sigma_default: 0.1,
            weight: WeightParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RigidSplit {
    pub rigid: RigidTransform,
    /// `(pᵢ + motionᵢ) − rigid(pᵢ)` on visible nodes, zero elsewhere.
    pub residual: Vec<Motion3>,
    pub translation_only: bool,
}

fn check_inputs(graph: &NodeGraph, motions: &[Motion3], mask: &VisibilityMask) -> Result<(), MotionError> {
    if motions.len() != graph.len() {
        return Err(MotionError::CountMismatch {
            what: "motions",
            expected: graph.len(),
            got: motions.len(),
        });
    }
    if mask.len() != graph.len() {
        return Err(MotionError::CountMismatch {
            what: "visibility mask",
            expected: graph.len(),
            got: mask.len(),
        });
    }
    Ok(())
}

/// Splits visible motion into a global rigid part and per-node residuals.
/// Degenerate visible sets fall back to their mean translation.
pub fn split_rigid(
    graph: &NodeGraph,
    motions: &[Motion3],
    mask: &VisibilityMask,
) -> Result<RigidSplit, MotionError> {
    check_inputs(graph, motions, mask)?;
    let vis = mask.visible_indices();
    let src: Vec<Point3> = vis.iter().map(|&i| graph.positions[i]).collect();
    let dst: Vec<Point3> = vis.iter().map(|&i| graph.positions[i] + motions[i]).collect();
    let (rigid, translation_only) = match rigid_fit(&src, &dst, &vec![1.0; vis.len()]) {
        Ok(t) => (t, false),
        Err(_) => {
            let mean = if vis.is_empty() {
                Motion3::zeros()
            } else {
                vis.iter().map(|&i| motions[i]).sum::<Motion3>() / vis.len() as f64
            };
            (RigidTransform::from_translation(mean), true)
        }
    };
    let residual = (0..graph.len())
        .map(|i| {
            if mask.is_visible(i) {
                let p = graph.positions[i];
                p + motions[i] - rigid.apply(&p)
            } else {
                Motion3::zeros()
            }
        })
        .collect();
    Ok(RigidSplit {
        rigid,
        residual,
        translation_only,
    })
}

/// Global rigid fit to the visible motion, applied to every node.
pub fn predict_rigid(
    graph: &NodeGraph,
    visible_motions: &[Motion3],
    mask: &VisibilityMask,
    occluded_sigma: f64,
) -> Result<MotionPrediction, MotionError> {
    let split = split_rigid(graph, visible_motions, mask)?;
    let motions = graph
        .positions
        .iter()
        .enumerate()
        .map(|(i, p)| GaussianMotion {
            mu: split.rigid.apply(p) - p,
            sigma: if mask.is_visible(i) { 0.0 } else { occluded_sigma },
        })
        .collect();
    Ok(MotionPrediction {
        translation_only: split.translation_only,
        ..MotionPrediction::new(motions, PredictionSource::Rigid)
    })
}

/// Local-rigidity energy over node transforms plus per-node pulls of the
/// warped node position `pᵢ + tᵢ` toward `pᵢ + targetᵢ`.
struct ArapProblem<'a> {
    positions: &'a [Point3],
    edges: Vec<(usize, usize)>,
    pulls: Vec<(usize, Motion3, f64)>,
}

impl<'a> ArapProblem<'a> {
    fn new(graph: &'a NodeGraph, pulls: Vec<(usize, Motion3, f64)>) -> Self {
        Self {
            positions: &graph.positions,
            edges: graph.directed_edges().collect(),
            pulls,
        }
    }

    #[inline]
    fn edge_residual(&self, x: &[RigidTransform], j: usize, i: usize) -> Vector3<f64> {
        let (pj, pi) = (self.positions[j], self.positions[i]);
        x[j].rotation * (pi - pj) + pj + x[j].translation - pi - x[i].translation
    }
}

impl NodeProblem for ArapProblem<'_> {
    fn node_count(&self) -> usize {
        self.positions.len()
    }

    fn energy(&self, x: &[RigidTransform]) -> f64 {
        let reg: f64 = self
            .edges
            .iter()
            .map(|&(j, i)| self.edge_residual(x, j, i).norm_squared())
            .sum();
        let data: f64 = self
            .pulls
            .iter()
            .map(|(i, m, w)| w * (x[*i].translation - m).norm_squared())
            .sum();
        reg + data
    }

    fn linearize(&self, x: &[RigidTransform], eq: &mut NormalEquations) {
        for &(j, i) in &self.edges {
            let r = self.edge_residual(x, j, i);
            let rotated = x[j].rotation * (self.positions[i] - self.positions[j]);
            let mut jj = Matrix3x6::zeros();
            jj.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&rotated)));
            jj.fixed_view_mut::<3, 3>(0, 3).fill_with_identity();
            let mut ji = Matrix3x6::zeros();
            ji.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-nalgebra::Matrix3::identity()));
            eq.add(&[(j, jj), (i, ji)], &r, 1.0);
        }
        for (i, m, w) in &self.pulls {
            let r = x[*i].translation - m;
            let mut ji = Matrix3x6::zeros();
            ji.fixed_view_mut::<3, 3>(0, 3).fill_with_identity();
            eq.add(&[(*i, ji)], &r, *w);
        }
    }
}

fn graph_sigma(hops: Option<usize>, params: &ArapParams) -> f64 {
    match hops {
        Some(h) => (params.sigma_min * (1 + h) as f64).min(params.sigma_default),
        None => params.sigma_default,
    }
}

/// As-rigid-as-possible deformation of the finest graph level, anchored to
/// the visible motion.
pub fn predict_arap(
    pyramid: &GraphPyramid,
    visible_motions: &[Motion3],
    mask: &VisibilityMask,
    params: &ArapParams,
) -> Result<MotionPrediction, MotionError> {
    let graph = pyramid.level(0);
    let split = split_rigid(graph, visible_motions, mask)?;
    let hops = graph.hop_distances(mask.visible_indices());
    let pulls = mask
        .visible_indices()
        .into_iter()
        .map(|i| (i, visible_motions[i], params.lambda_anchor))
        .collect();
    let problem = ArapProblem::new(graph, pulls);
    let x0 = graph
        .positions
        .iter()
        .map(|p| node_local(&split.rigid, p))
        .collect();
    let solved = minimize(&problem, x0, &params.solver)?;

    let mut unreachable = Vec::new();
    let motions = (0..graph.len())
        .map(|i| {
            let p = graph.positions[i];
            if mask.is_visible(i) {
                GaussianMotion {
                    mu: visible_motions[i],
                    sigma: 0.0,
                }
            } else if hops[i].is_none() {
                unreachable.push(i);
                GaussianMotion {
                    mu: split.rigid.apply(&p) - p,
                    sigma: params.sigma_default,
                }
            } else {
                GaussianMotion {
                    mu: solved.transforms[i].translation,
                    sigma: graph_sigma(hops[i], params),
                }
            }
        })
        .collect();
    Ok(MotionPrediction {
        motions,
        source: PredictionSource::Arap,
        translation_only: split.translation_only,
        unreachable,
    })
}

fn refine_problem<'a>(
    graph: &'a NodeGraph,
    prediction: &MotionPrediction,
    mask: &VisibilityMask,
    visible_motions: &[Motion3],
    params: &ArapParams,
) -> ArapProblem<'a> {
    let pulls = (0..graph.len())
        .map(|i| {
            if mask.is_visible(i) {
                (i, visible_motions[i], params.lambda_anchor)
            } else {
                let g = &prediction.motions[i];
                (i, g.mu, motion_weight(g, &params.weight))
            }
        })
        .collect();
    ArapProblem::new(graph, pulls)
}

/// ARAP post-processing of an existing prediction: occluded nodes are pulled
/// toward their predicted motion with the confidence weight, visible nodes
/// stay anchored to the observations. σ is passed through.
pub fn arap_refine(
    pyramid: &GraphPyramid,
    prediction: &MotionPrediction,
    mask: &VisibilityMask,
    visible_motions: &[Motion3],
    params: &ArapParams,
) -> Result<MotionPrediction, MotionError> {
    let graph = pyramid.level(0);
    check_inputs(graph, visible_motions, mask)?;
    if prediction.len() != graph.len() {
        return Err(MotionError::CountMismatch {
            what: "prediction",
            expected: graph.len(),
            got: prediction.len(),
        });
    }
    let start: Vec<Motion3> = (0..graph.len())
        .map(|i| {
            if mask.is_visible(i) {
                visible_motions[i]
            } else {
                prediction.motions[i].mu
            }
        })
        .collect();
    let rotation = split_rigid(graph, &start, &VisibilityMask::all_visible(graph.len()))?
        .rigid
        .rotation;
    let x0 = start
        .iter()
        .map(|m| RigidTransform {
            rotation,
            translation: *m,
        })
        .collect();
    let problem = refine_problem(graph, prediction, mask, visible_motions, params);
    let solved = minimize(&problem, x0, &params.solver)?;
    let motions = (0..graph.len())
        .map(|i| GaussianMotion {
            mu: if mask.is_visible(i) {
                visible_motions[i]
            } else {
                solved.transforms[i].translation
            },
            sigma: prediction.motions[i].sigma,
        })
        .collect();
    Ok(MotionPrediction {
        motions,
        source: PredictionSource::ArapRefined,
        translation_only: prediction.translation_only,
        unreachable: prediction.unreachable.clone(),
    })
}

/// Pluggable occluded-motion predictor.
pub trait MotionPredictor {
    fn predict(
        &self,
        pyramid: &GraphPyramid,
        visible_motions: &[Motion3],
        mask: &VisibilityMask,
    ) -> Result<MotionPrediction, MotionError>;
}

pub struct RigidPredictor {
    pub occluded_sigma: f64,
}

impl MotionPredictor for RigidPredictor {
    fn predict(
        &self,
        pyramid: &GraphPyramid,
        visible_motions: &[Motion3],
        mask: &VisibilityMask,
    ) -> Result<MotionPrediction, MotionError> {
        predict_rigid(pyramid.level(0), visible_motions, mask, self.occluded_sigma)
    }
}

pub struct ArapPredictor {
    pub params: ArapParams,
}

impl MotionPredictor for ArapPredictor {
    fn predict(
        &self,
        pyramid: &GraphPyramid,
        visible_motions: &[Motion3],
        mask: &VisibilityMask,
    ) -> Result<MotionPrediction, MotionError> {
        predict_arap(pyramid, visible_motions, mask, &self.params)
    }
}

/// Serves a prediction produced elsewhere.
pub struct ExternalPredictor {
    pub prediction: MotionPrediction,
}

impl MotionPredictor for ExternalPredictor {
    fn predict(
        &self,
        pyramid: &GraphPyramid,
        _visible_motions: &[Motion3],
        _mask: &VisibilityMask,
    ) -> Result<MotionPrediction, MotionError> {
        let n = pyramid.level(0).len();
        if self.prediction.len() != n {
            return Err(MotionError::CountMismatch {
                what: "prediction",
                expected: n,
                got: self.prediction.len(),
            });
        }
        Ok(self.prediction.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub node_id: usize,
    pub mu: [f64; 3],
    pub sigma: f64,
}

/// JSON form of one frame's prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionFile {
    pub source: PredictionSource,
    pub nodes: Vec<PredictionRecord>,
    #[serde(default)]
    pub translation_only: bool,
    #[serde(default)]
    pub unreachable: Vec<usize>,
}

impl From<&MotionPrediction> for PredictionFile {
    fn from(p: &MotionPrediction) -> Self {
        Self {
            source: p.source,
            nodes: p
                .motions
                .iter()
                .enumerate()
                .map(|(i, g)| PredictionRecord {
                    node_id: i,
                    mu: [g.mu.x, g.mu.y, g.mu.z],
                    sigma: g.sigma,
                })
                .collect(),
            translation_only: p.translation_only,
            unreachable: p.unreachable.clone(),
        }
    }
}

impl PredictionFile {
    /// Validates ids and σ and orders records by node id.
    pub fn into_prediction(self, expected: usize) -> Result<MotionPrediction, MotionError> {
        let rows: Vec<(usize, usize, Motion3, f64)> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(k, r)| (k + 1, r.node_id, Motion3::from(r.mu), r.sigma))
            .collect();
        let motions = assemble(rows, expected)?;
        Ok(MotionPrediction {
            motions,
            source: self.source,
            translation_only: self.translation_only,
            unreachable: self.unreachable,
        })
    }
}

/// `rows` are `(line, node_id, μ, σ)`.
fn assemble(
    rows: Vec<(usize, usize, Motion3, f64)>,
    expected: usize,
) -> Result<Vec<GaussianMotion>, MotionError> {
    if rows.len() != expected {
        return Err(MotionError::CountMismatch {
            what: "prediction rows",
            expected,
            got: rows.len(),
        });
    }
    let mut slots: Vec<Option<GaussianMotion>> = vec![None; expected];
    for (line, id, mu, sigma) in rows {
        if id >= expected {
            return Err(MotionError::ParseError {
                line,
                message: format!("node_id {id} out of range"),
            });
        }
        if !mu.iter().all(|v| v.is_finite()) || !sigma.is_finite() {
            return Err(MotionError::ParseError {
                line,
                message: "non-finite value".into(),
            });
        }
        if sigma < 0.0 {
            return Err(MotionError::NegativeSigma { node: id });
        }
        if slots[id].replace(GaussianMotion { mu, sigma }).is_some() {
            return Err(MotionError::ParseError {
                line,
                message: format!("duplicate node_id {id}"),
            });
        }
    }
    Ok(slots.into_iter().map(|s| s.expect("all ids filled")).collect())
}

/// Parses the CSV prediction format. Line numbers are 1-based and count the
/// header.
pub fn parse_predictions_csv(text: &str, expected: usize) -> Result<Vec<GaussianMotion>, MotionError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header_ok = reader
        .headers()
        .is_ok_and(|h| h.iter().collect::<Vec<_>>().join(",") == CSV_HEADER);
    if !header_ok {
        return Err(MotionError::ParseError {
            line: 1,
            message: format!("expected header `{CSV_HEADER}`"),
        });
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| MotionError::ParseError {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line_no = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != 5 {
            return Err(MotionError::ParseError {
                line: line_no,
                message: format!("expected 5 fields, found {}", record.len()),
            });
        }
        let bad = |what: &str| MotionError::ParseError {
            line: line_no,
            message: format!("invalid {what}"),
        };
        let id: usize = record[0].parse().map_err(|_| bad("node_id"))?;
        let mut v = [0.0; 4];
        for (i, (slot, name)) in v.iter_mut().zip(["mu_x", "mu_y", "mu_z", "sigma"]).enumerate() {
            *slot = record[i + 1].parse().map_err(|_| bad(name))?;
        }
        rows.push((line_no, id, Motion3::new(v[0], v[1], v[2]), v[3]));
    }
    assemble(rows, expected)
}

/// CSV text with shortest round-trip float formatting.
pub fn predictions_to_csv(prediction: &MotionPrediction) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for (i, g) in prediction.motions.iter().enumerate() {
        s.push_str(&format!("{},{:?},{:?},{:?},{:?}\n", i, g.mu.x, g.mu.y, g.mu.z, g.sigma));
    }
    s
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

/// Writes CSV, or canonical JSON when the path ends in `.json`.
pub fn write_predictions(path: &Path, prediction: &MotionPrediction) -> Result<(), MotionError> {
    if is_json(path) {
        write_json(path, &PredictionFile::from(prediction))?;
    } else {
        fs::write(path, predictions_to_csv(prediction)).map_err(|e| IoError::io(path, e))?;
    }
    Ok(())
}

/// Reads an externally produced prediction (CSV or JSON) and truncates σ to
/// `sigma_min`.
pub fn load_external_predictions(
    path: &Path,
    expected_node_count: usize,
    sigma_min: f64,
) -> Result<MotionPrediction, MotionError> {
    let mut prediction = if is_json(path) {
        let file: PredictionFile = read_json(path)?;
        file.into_prediction(expected_node_count)?
    } else {
        let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
        MotionPrediction::new(
            parse_predictions_csv(&text, expected_node_count)?,
            PredictionSource::External,
        )
    };
    prediction.source = PredictionSource::External;
    for g in prediction.motions.iter_mut() {
        g.sigma = truncate_sigma(g.sigma, sigma_min);
    }
    Ok(prediction)
}
