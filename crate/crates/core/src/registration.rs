//! Confidence-guided warp-field registration.
//!
//! The current warp field minimizes
//! `λ_depth E_depth + λ_motion E_motion + λ_2d E_2d + λ_reg E_reg`
//! over per-node rigid transforms, starting from the previous field moved by
//! the rigid part of the motion prediction.

use nalgebra::{Matrix1x6, Matrix2x6, Matrix3, Matrix3x6, SVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::{motion_weight, WeightParams};
use crate::geom::{rigid_fit, skew, Motion3, Point3, RigidTransform, Vec3, View};
use crate::motion::MotionPrediction;
use crate::raster::{splat_depth, visibility, DepthImage, FlowField};
use crate::solver::{minimize, LmParams, NodeProblem, NormalEquations, SolverError};
use crate::warpfield::{warp_point, warp_points, SkinnedVertex, WarpField};

pub type SolverParams = LmParams;

/// Fraction of skipped projection pairs above which a report is flagged.
pub const SKIPPED_2D_WARNING: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistrationError {
    #[error("warp fields are defined on different graphs")]
    GraphMismatch,
    #[error("{what}: expected {expected}, got {got}")]
    CountMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{0} dimensions do not match the camera")]
    DimensionMismatch(&'static str),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Correspondence {
    pub vertex: SkinnedVertex,
    pub target: Point3,
    /// Unit normal of the target surface.
    pub normal: Vec3,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorrespondenceSet {
    pub pairs: Vec<Correspondence>,
    /// Vertices hidden in the render of the previous frame.
    pub occluded: usize,
    pub dropped_out_of_bounds: usize,
    pub dropped_invalid_depth: usize,
    pub dropped_far: usize,
}

impl CorrespondenceSet {
    pub fn new(pairs: Vec<Correspondence>) -> Self {
        Self {
            pairs,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn dropped(&self) -> usize {
        self.dropped_out_of_bounds + self.dropped_invalid_depth + self.dropped_far
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegForm {
    /// `‖Tⱼ(pᵢ) − Tᵢ(pᵢ)‖²`.
    #[default]
    Standard,
    /// `‖Tⱼ(pᵢ) − Tᵢ(pⱼ)‖²`.
    Printed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyWeights {
    pub lambda_depth: f64,
    pub lambda_motion: f64,
    pub lambda_2d: f64,
    pub lambda_reg: f64,
    pub reg_form: RegForm,
}

impl Default for EnergyWeights {
    fn default() -> Self {
        Self {
            lambda_depth: 1.0,
            lambda_motion: 2.0,
            lambda_2d: 1e-6,
            lambda_reg: 5.0,
            reg_form: RegForm::Standard,
        }
    }
}

impl EnergyWeights {
    pub fn validate(&self) -> Result<(), RegistrationError> {
        let all = [self.lambda_depth, self.lambda_motion, self.lambda_2d, self.lambda_reg];
        if all.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(RegistrationError::InvalidWeights(
                "weights must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Per-node predicted displacements with their confidence weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionTargets {
    pub mu: Vec<Motion3>,
    pub weights: Vec<f64>,
}

impl MotionTargets {
    pub fn from_prediction(prediction: &MotionPrediction, params: &WeightParams) -> Self {
        Self {
            mu: prediction.mus(),
            weights: prediction
                .motions
                .iter()
                .map(|g| motion_weight(g, params))
                .collect(),
        }
    }

    /// Every node weighted one.
    pub fn uniform(prediction: &MotionPrediction) -> Self {
        Self {
            mu: prediction.mus(),
            weights: vec![1.0; prediction.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }
}

/// Unweighted term values and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TermEnergies {
    pub depth: f64,
    pub motion: f64,
    #[serde(rename = "2d")]
    pub flow_2d: f64,
    pub reg: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub before: TermEnergies,
    pub after: TermEnergies,
    /// Weighted total at the start and after every accepted step.
    pub totals: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub pairs: usize,
    pub skipped_2d: usize,
    pub skipped_2d_warning: bool,
}

#[inline]
fn blend(positions: &[Point3], x: &[RigidTransform], sv: &SkinnedVertex) -> Point3 {
    sv.anchors
        .iter()
        .map(|&(k, w)| (x[k].rotation * (sv.position - positions[k]) + positions[k] + x[k].translation) * w)
        .sum()
}

/// `∂v′/∂(ω_k, τ_k)` for every anchor of `sv`.
fn blend_jacobians(positions: &[Point3], x: &[RigidTransform], sv: &SkinnedVertex) -> Vec<(usize, Matrix3x6<f64>)> {
    sv.anchors
        .iter()
        .map(|&(k, w)| {
            let a = x[k].rotation * (sv.position - positions[k]);
            let mut j = Matrix3x6::zeros();
            j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&a) * w));
            j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(Matrix3::identity() * w));
            (k, j)
        })
        .collect()
}

fn depth_energy(positions: &[Point3], x: &[RigidTransform], corr: &CorrespondenceSet) -> f64 {
    corr.pairs
        .iter()
        .map(|c| {
            let r = c.normal.dot(&(blend(positions, x, &c.vertex) - c.target));
            r * r
        })
        .sum()
}

fn flow_residual(view: &View, v: &Point3, target: &Point3) -> Option<SVector<f64, 2>> {
    let (a, b) = (view.project(v).ok()?, view.project(target).ok()?);
    Some(SVector::<f64, 2>::new(a.0 - b.0, a.1 - b.1))
}

fn flow_energy(
    positions: &[Point3],
    x: &[RigidTransform],
    corr: &CorrespondenceSet,
    view: &View,
) -> (f64, usize) {
    let mut sum = 0.0;
    let mut skipped = 0;
    for c in &corr.pairs {
        match flow_residual(view, &blend(positions, x, &c.vertex), &c.target) {
            Some(r) => sum += r.norm_squared(),
            None => skipped += 1,
        }
    }
    (sum, skipped)
}

fn motion_residual(
    x: &[RigidTransform],
    prev: &[RigidTransform],
    targets: &MotionTargets,
    i: usize,
) -> Motion3 {
    x[i].translation - prev[i].translation - targets.mu[i]
}

fn motion_energy(x: &[RigidTransform], prev: &[RigidTransform], targets: &MotionTargets) -> f64 {
    (0..x.len())
        .map(|i| targets.weights[i] * motion_residual(x, prev, targets, i).norm_squared())
        .sum()
}

#[inline]
fn reg_residual(positions: &[Point3], x: &[RigidTransform], j: usize, i: usize, form: RegForm) -> Vec3 {
    let (pj, pi) = (positions[j], positions[i]);
    let tj_at_pi = x[j].rotation * (pi - pj) + pj + x[j].translation;
    match form {
        RegForm::Standard => tj_at_pi - pi - x[i].translation,
        RegForm::Printed => tj_at_pi - (x[i].rotation * (pj - pi) + pi + x[i].translation),
    }
}

fn reg_energy(positions: &[Point3], edges: &[(usize, usize)], x: &[RigidTransform], form: RegForm) -> f64 {
    edges
        .iter()
        .map(|&(j, i)| reg_residual(positions, x, j, i, form).norm_squared())
        .sum()
}

/// `Σ (nᵀ(v′ − u))²` over correspondence pairs.
pub fn e_depth(field: &WarpField, corr: &CorrespondenceSet) -> f64 {
    depth_energy(&field.graph.positions, &field.transforms, corr)
}

/// `Σ wᵢ‖Tᵢᵗ(pᵢ) − (Tᵢᵗ⁻¹(pᵢ) + μᵢ)‖²`.
pub fn e_motion(
    field_prev: &WarpField,
    field_cur: &WarpField,
    targets: &MotionTargets,
) -> Result<f64, RegistrationError> {
    if !field_prev.same_graph(field_cur) {
        return Err(RegistrationError::GraphMismatch);
    }
    check_targets(field_cur.len(), targets)?;
    Ok(motion_energy(&field_cur.transforms, &field_prev.transforms, targets))
}

/// `Σ ‖Π(v′) − Π(u)‖²` in pixels², with the number of pairs skipped because
/// a point lies behind the camera.
pub fn e_2d(field: &WarpField, corr: &CorrespondenceSet, view: &View) -> (f64, usize) {
    flow_energy(&field.graph.positions, &field.transforms, corr, view)
}

/// Local-rigidity regularizer over the directed graph edges.
pub fn e_reg(field: &WarpField, form: RegForm) -> f64 {
    let edges: Vec<_> = field.graph.directed_edges().collect();
    reg_energy(&field.graph.positions, &edges, &field.transforms, form)
}

fn check_targets(n: usize, targets: &MotionTargets) -> Result<(), RegistrationError> {
    if targets.mu.len() != n || targets.weights.len() != n {
        return Err(RegistrationError::CountMismatch {
            what: "motion targets",
            expected: n,
            got: targets.mu.len().min(targets.weights.len()),
        });
    }
    Ok(())
}

/// Everything one registration step reads.
#[derive(Debug, Clone, Copy)]
pub struct RegistrationInputs<'a> {
    pub field_prev: &'a WarpField,
    pub correspondences: &'a CorrespondenceSet,
    pub targets: Option<&'a MotionTargets>,
    pub view: &'a View,
}

/// The total registration energy as a node problem.
pub struct RegistrationProblem<'a> {
    inputs: RegistrationInputs<'a>,
    weights: EnergyWeights,
    edges: Vec<(usize, usize)>,
}

impl<'a> RegistrationProblem<'a> {
    pub fn new(inputs: RegistrationInputs<'a>, weights: EnergyWeights) -> Result<Self, RegistrationError> {
        weights.validate()?;
        let n = inputs.field_prev.len();
        if let Some(t) = inputs.targets {
            check_targets(n, t)?;
        }
        if let Some(c) = inputs
            .correspondences
            .pairs
            .iter()
            .find(|c| c.vertex.anchors.iter().any(|&(k, _)| k >= n))
        {
            let got = c.vertex.anchors.iter().map(|a| a.0).max().unwrap_or(0);
            return Err(RegistrationError::CountMismatch {
                what: "anchor index",
                expected: n,
                got,
            });
        }
        Ok(Self {
            inputs,
            weights,
            edges: inputs.field_prev.graph.directed_edges().collect(),
        })
    }

    fn positions(&self) -> &[Point3] {
        &self.inputs.field_prev.graph.positions
    }

    pub fn terms(&self, x: &[RigidTransform]) -> (TermEnergies, usize) {
        let p = self.positions();
        let w = &self.weights;
        let depth = depth_energy(p, x, self.inputs.correspondences);
        let (flow_2d, skipped) = flow_energy(p, x, self.inputs.correspondences, self.inputs.view);
        let motion = self
            .inputs
            .targets
            .map_or(0.0, |t| motion_energy(x, &self.inputs.field_prev.transforms, t));
        let reg = reg_energy(p, &self.edges, x, w.reg_form);
        let total = w.lambda_depth * depth + w.lambda_motion * motion + w.lambda_2d * flow_2d + w.lambda_reg * reg;
        (
            TermEnergies {
                depth,
                motion,
                flow_2d,
                reg,
                total,
            },
            skipped,
        )
    }
}

impl NodeProblem for RegistrationProblem<'_> {
    fn node_count(&self) -> usize {
        self.inputs.field_prev.len()
    }

    fn energy(&self, x: &[RigidTransform]) -> f64 {
        self.terms(x).0.total
    }

    fn linearize(&self, x: &[RigidTransform], eq: &mut NormalEquations) {
        let p = self.positions();
        let w = &self.weights;
        let view = self.inputs.view;
        if w.lambda_depth > 0.0 || w.lambda_2d > 0.0 {
            for c in &self.inputs.correspondences.pairs {
                let v = blend(p, x, &c.vertex);
                let blocks = blend_jacobians(p, x, &c.vertex);
                if w.lambda_depth > 0.0 {
                    let r = SVector::<f64, 1>::new(c.normal.dot(&(v - c.target)));
                    let jd: Vec<(usize, Matrix1x6<f64>)> =
                        blocks.iter().map(|(k, j)| (*k, c.normal.transpose() * j)).collect();
                    eq.add(&jd, &r, w.lambda_depth);
                }
                if w.lambda_2d > 0.0 {
                    if let Some(r) = flow_residual(view, &v, &c.target) {
                        let proj = view.camera.project_jacobian(&view.to_camera(&v));
                        let jf: Vec<(usize, Matrix2x6<f64>)> = blocks.iter().map(|(k, j)| (*k, proj * j)).collect();
                        eq.add(&jf, &r, w.lambda_2d);
                    }
                }
            }
        }
        if let (Some(t), true) = (self.inputs.targets, w.lambda_motion > 0.0) {
            let prev = &self.inputs.field_prev.transforms;
            let mut jm = Matrix3x6::zeros();
            jm.fixed_view_mut::<3, 3>(0, 3).fill_with_identity();
            for i in 0..x.len() {
                let r = motion_residual(x, prev, t, i);
                eq.add(&[(i, jm)], &r, w.lambda_motion * t.weights[i]);
            }
        }
        if w.lambda_reg > 0.0 {
            for &(j, i) in &self.edges {
                let r = reg_residual(p, x, j, i, w.reg_form);
                let mut jj = Matrix3x6::zeros();
                jj.fixed_view_mut::<3, 3>(0, 0)
                    .copy_from(&(-skew(&(x[j].rotation * (p[i] - p[j])))));
                jj.fixed_view_mut::<3, 3>(0, 3).fill_with_identity();
                let mut ji = Matrix3x6::zeros();
                if w.reg_form == RegForm::Printed {
                    ji.fixed_view_mut::<3, 3>(0, 0)
                        .copy_from(&skew(&(x[i].rotation * (p[j] - p[i]))));
                }
                ji.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-Matrix3::identity()));
                eq.add(&[(j, jj), (i, ji)], &r, w.lambda_reg);
            }
        }
    }
}

/// World-space rigid map that best moves the previous warped nodes by the
/// predicted displacements; a weighted mean translation when degenerate.
fn predicted_rigid(field_prev: &WarpField, targets: &MotionTargets) -> RigidTransform {
    let src = field_prev.node_positions();
    let dst: Vec<Point3> = src.iter().zip(&targets.mu).map(|(p, m)| p + m).collect();
    if let Ok(t) = rigid_fit(&src, &dst, &targets.weights) {
        return t;
    }
    let total: f64 = targets.weights.iter().sum();
    if total > 0.0 {
        let mean = targets
            .mu
            .iter()
            .zip(&targets.weights)
            .map(|(m, w)| m * *w)
            .sum::<Motion3>()
            / total;
        RigidTransform::from_translation(mean)
    } else {
        RigidTransform::identity()
    }
}

/// Solves for the current warp field. Starts from `field_prev` followed by
/// the rigid component of the prediction, if any.
pub fn solve_warpfield(
    inputs: RegistrationInputs<'_>,
    weights: &EnergyWeights,
    params: &SolverParams,
) -> Result<(WarpField, EnergyReport), RegistrationError> {
    let problem = RegistrationProblem::new(inputs, *weights)?;
    let init = match inputs.targets {
        Some(t) => inputs.field_prev.then_global(&predicted_rigid(inputs.field_prev, t)),
        None => inputs.field_prev.clone(),
    };
    let (before, _) = problem.terms(&init.transforms);
    let outcome = minimize(&problem, init.transforms, params)?;
    let (after, skipped) = problem.terms(&outcome.transforms);
    let pairs = inputs.correspondences.len();
    let field = WarpField {
        graph: inputs.field_prev.graph.clone(),
        transforms: outcome.transforms,
    };
    let report = EnergyReport {
        before,
        after,
        totals: outcome.energies,
        iterations: outcome.iterations,
        converged: outcome.converged,
        pairs,
        skipped_2d: skipped,
        skipped_2d_warning: pairs > 0 && skipped as f64 > SKIPPED_2D_WARNING * pairs as f64,
    };
    Ok((field, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrespondenceParams {
    pub splat_radius: usize,
    /// Self-occlusion tolerance of the render at `t − 1`, meters.
    pub visibility_tol: f64,
    /// Pairs farther apart than this are dropped, meters.
    pub max_distance: f64,
    /// Depth jump that separates surfaces when estimating normals, meters.
    pub normal_max_jump: f64,
}

impl Default for CorrespondenceParams {
    fn default() -> Self {
        Self {
            splat_radius: 1,
            visibility_tol: 0.02,
            max_distance: 0.1,
            normal_max_jump: 0.05,
        }
    }
}

/// Renders the previous warped model, follows the flow from each visible
/// vertex's pixel and backprojects the landing pixel with the current depth.
#[allow(clippy::too_many_arguments)]
pub fn build_correspondences(
    field_prev: &WarpField,
    vertices: &[SkinnedVertex],
    flow: &FlowField,
    depth_cur: &DepthImage,
    view_prev: &View,
    view_cur: &View,
    params: &CorrespondenceParams,
) -> Result<CorrespondenceSet, RegistrationError> {
    let (w, h) = (view_prev.camera.width, view_prev.camera.height);
    if flow.width != w || flow.height != h || flow.data.len() != w * h {
        return Err(RegistrationError::DimensionMismatch("flow"));
    }
    let (wc, hc) = (view_cur.camera.width, view_cur.camera.height);
    if depth_cur.width != wc || depth_cur.height != hc || depth_cur.data.len() != wc * hc {
        return Err(RegistrationError::DimensionMismatch("depth"));
    }
    let warped = warp_points(field_prev, vertices);
    let zbuf = splat_depth(&warped, view_prev, params.splat_radius);
    let vis = visibility(&warped, &zbuf, view_prev, params.visibility_tol);

    let mut set = CorrespondenceSet::default();
    for (i, sv) in vertices.iter().enumerate() {
        if !vis.is_visible(i) {
            set.occluded += 1;
            continue;
        }
        let Ok((u, v)) = view_prev.project(&warped[i]) else {
            set.occluded += 1;
            continue;
        };
        let Some([du, dv]) = flow.sample(u, v) else {
            set.dropped_out_of_bounds += 1;
            continue;
        };
        let (tu, tv) = (u + du, v + dv);
        let Some((x, y)) = view_cur.camera.pixel(tu, tv) else {
            set.dropped_out_of_bounds += 1;
            continue;
        };
        let d = depth_cur.get(x, y);
        let (Ok(target), Some(normal)) = (
            view_cur.backproject(tu, tv, d),
            depth_cur.normal_at(view_cur, x, y, params.normal_max_jump),
        ) else {
            set.dropped_invalid_depth += 1;
            continue;
        };
        if (target - warped[i]).norm() > params.max_distance {
            set.dropped_far += 1;
            continue;
        }
        set.pairs.push(Correspondence {
            vertex: sv.clone(),
            target,
            normal,
        });
    }
    Ok(set)
}

/// Warped positions of the corresponded vertices.
pub fn warped_pairs(field: &WarpField, corr: &CorrespondenceSet) -> Vec<Point3> {
    corr.pairs.iter().map(|c| warp_point(field, &c.vertex)).collect()
}
