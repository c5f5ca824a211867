//! Configuration, on-disk formats and the generate → predict → register →
//! evaluate pipeline shared by the command line and the tests.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Rotation3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::truncate_sigma;
use crate::geom::{Motion3, Point3, RigidTransform, View};
use crate::io::{read_json, read_raster, write_json, write_raster, IoError};
use crate::metrics::{epe, geometry_error, occluded_observed, EvalReport, FrameMetrics, GeometryParams, MetricError};
use crate::motion::{
    arap_refine, load_external_predictions, predict_arap, predict_rigid, predictions_to_csv,
    ArapParams, MotionError, MotionPrediction, PredictionFile, PredictionSource, VisibilityMask,
};
use crate::pyramid::{GraphPyramid, NodeGraph, PyramidError};
use crate::raster::{DepthImage, FlowField};
use crate::registration::{
    build_correspondences, solve_warpfield, CorrespondenceParams, EnergyReport, EnergyWeights, MotionTargets,
    RegistrationError, RegistrationInputs,
};
use crate::solver::{LmParams, SolverError};
use crate::synthgen::{
    generate_sequence, make_articulated_animation, random_articulated_spec, AnimationSource, ArticulatedSpec,
    Sequence, SequenceConfig, SyntheticFrame, SynthError,
};
use crate::warpfield::{node_displacements, skin_vertices, warp_points, SkinnedVertex, WarpError, WarpField, DEFAULT_ANCHORS};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Registration(#[from] RegistrationError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Warp(#[from] WarpError),
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
}

impl PipelineError {
    fn invalid(path: &Path, message: impl ToString) -> Self {
        PipelineError::Invalid {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }

    fn is_solver(&self) -> bool {
        matches!(
            self,
            PipelineError::Motion(MotionError::Solver(_)) | PipelineError::Registration(RegistrationError::Solver(_))
        )
    }

    /// 1 usage, 2 input/output or format, 3 solver failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Usage(_) => 1,
            e if e.is_solver() => 3,
            _ => 2,
        }
    }
}

impl From<SolverError> for PipelineError {
    fn from(e: SolverError) -> Self {
        PipelineError::Registration(RegistrationError::Solver(e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SkinningParams {
    pub anchors: usize,
    pub radius: f64,
}

impl Default for SkinningParams {
    fn default() -> Self {
        Self {
            anchors: DEFAULT_ANCHORS,
            radius: 0.08,
        }
    }
}

/// How predicted motions are weighted in the registration motion term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// Confidence weight from σ and ‖μ‖.
    #[default]
    Confidence,
    Uniform,
}

/// Every tunable default in one place; loadable from TOML or JSON.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub sequence: SequenceConfig,
    pub arap: ArapParams,
    pub rigid: RigidParams,
    pub weights: EnergyWeights,
    pub weighting: Weighting,
    pub solver: LmParams,
    pub correspondence: CorrespondenceParams,
    pub skinning: SkinningParams,
    pub geometry: GeometryParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigidParams {
    /// σ given to occluded nodes by the rigid predictor.
    pub occluded_sigma: f64,
}

impl Default for RigidParams {
    fn default() -> Self {
        Self { occluded_sigma: 0.1 }
    }
}

fn is_toml(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"))
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

/// Reads TOML (by extension) or JSON into `T`.
pub fn load_document<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    if is_toml(path) {
        toml::from_str(&text).map_err(|e| PipelineError::invalid(path, e))
    } else {
        serde_json::from_str(&text).map_err(|e| PipelineError::invalid(path, e))
    }
}

pub fn load_config(path: Option<&Path>) -> Result<Config, PipelineError> {
    match path {
        Some(p) => load_document(p),
        None => Ok(Config::default()),
    }
}

/// What `generate --spec` accepts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AnimationSpec {
    /// A random articulated object drawn from the generation seed.
    Random { random: RandomSpec },
    /// Externally supplied per-frame points.
    Imported { points: Vec<Vec<[f64; 3]>>, fps: f64 },
    Articulated(ArticulatedSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomSpec {
    pub segments: usize,
    pub frames: usize,
}

impl AnimationSpec {
    pub fn animation(&self, seed: u64) -> Result<AnimationSource, SynthError> {
        match self {
            AnimationSpec::Random { random } => {
                use rand::SeedableRng;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
                make_articulated_animation(&random_articulated_spec(&mut rng, random.segments, random.frames))
            }
            AnimationSpec::Imported { points, fps } => AnimationSource::from_frames(
                points
                    .iter()
                    .map(|f| f.iter().map(|p| Point3::from(*p)).collect())
                    .collect(),
                *fps,
            ),
            AnimationSpec::Articulated(spec) => make_articulated_animation(spec),
        }
    }
}

// ---------------------------------------------------------------------------
// Sequence directory

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub seed: u64,
    pub frame_count: usize,
    pub node_count: usize,
    pub noise_sigma: f64,
    pub extent: Option<f64>,
    pub config: SequenceConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: usize,
    pub camera_center: [f64; 3],
    pub node_positions: Vec<[f64; 3]>,
    pub visibility: VisibilityMask,
    pub observed: VisibilityMask,
    pub gt_motions: Vec<[f64; 3]>,
    pub visible_motions: Vec<Option<[f64; 3]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphRecord {
    pub positions: Vec<[f64; 3]>,
    pub edges: Vec<Vec<usize>>,
    /// Surface point index of each node.
    pub surface_points: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceRecord {
    pub points: Vec<[f64; 3]>,
}

fn arr(v: &Point3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn frame_path(dir: &Path, stem: &str, frame: usize, ext: &str) -> PathBuf {
    dir.join(format!("{stem}_{frame:04}.{ext}"))
}

fn create_dir(dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e).into())
}

pub fn write_sequence(dir: &Path, seq: &Sequence, config: &SequenceConfig) -> Result<(), PipelineError> {
    create_dir(dir)?;
    write_json(
        &dir.join("meta.json"),
        &SequenceMeta {
            seed: seq.seed,
            frame_count: seq.frames.len(),
            node_count: seq.node_count(),
            noise_sigma: seq.noise_sigma,
            extent: seq.extent,
            config: config.clone(),
        },
    )?;
    let g = seq.pyramid.level(0);
    write_json(
        &dir.join("graph.json"),
        &GraphRecord {
            positions: g.positions.iter().map(arr).collect(),
            edges: g.edges.clone(),
            surface_points: seq.node_points.clone(),
        },
    )?;
    write_json(
        &dir.join("surface.json"),
        &SurfaceRecord {
            points: seq.surface().iter().map(arr).collect(),
        },
    )?;
    for f in &seq.frames {
        write_json(
            &frame_path(dir, "frame", f.index, "json"),
            &FrameRecord {
                index: f.index,
                camera_center: arr(&f.view.center),
                node_positions: f.node_positions.iter().map(arr).collect(),
                visibility: f.visibility.clone(),
                observed: f.observed.clone(),
                gt_motions: f.gt_motions.iter().map(arr).collect(),
                visible_motions: f.visible_motions.iter().map(|m| m.as_ref().map(arr)).collect(),
            },
        )?;
        write_raster(&frame_path(dir, "depth", f.index, "bin"), &f.depth.to_f32())?;
        write_raster(&frame_path(dir, "flow", f.index, "bin"), &f.flow.to_f32())?;
    }
    Ok(())
}

fn check_len(path: &Path, what: &str, expected: usize, got: usize) -> Result<(), PipelineError> {
    if expected != got {
        return Err(PipelineError::invalid(
            path,
            format!("{what}: expected {expected} entries, found {got}"),
        ));
    }
    Ok(())
}

/// Loads a sequence directory. Only the canonical surface is stored, so
/// `surface_frames` holds a single frame.
pub fn read_sequence(dir: &Path) -> Result<(Sequence, SequenceMeta), PipelineError> {
    let meta: SequenceMeta = read_json(&dir.join("meta.json"))?;
    let graph_path = dir.join("graph.json");
    let graph: GraphRecord = read_json(&graph_path)?;
    check_len(&graph_path, "node positions", meta.node_count, graph.positions.len())?;
    check_len(&graph_path, "edge lists", meta.node_count, graph.edges.len())?;
    let base = NodeGraph::new(graph.positions.iter().map(|p| Point3::from(*p)).collect(), graph.edges)
        .map_err(|e| PipelineError::invalid(&graph_path, e))?;
    let pyramid = GraphPyramid::from_level0(base, &meta.config.pyramid).map_err(|e| PipelineError::invalid(&graph_path, e))?;
    let surface: SurfaceRecord = read_json(&dir.join("surface.json"))?;
    let cam = meta.config.camera;
    cam.validate().map_err(|e| PipelineError::invalid(&dir.join("meta.json"), e))?;
    let pixels = cam.width * cam.height;
    let n = meta.node_count;
    let mut frames = Vec::with_capacity(meta.frame_count);
    for t in 0..meta.frame_count {
        let path = frame_path(dir, "frame", t, "json");
        let r: FrameRecord = read_json(&path)?;
        for (what, len) in [
            ("node positions", r.node_positions.len()),
            ("visibility", r.visibility.len()),
            ("observed", r.observed.len()),
            ("gt motions", r.gt_motions.len()),
            ("visible motions", r.visible_motions.len()),
        ] {
            check_len(&path, what, n, len)?;
        }
        let depth = DepthImage::from_f32(cam.width, cam.height, &read_raster(&frame_path(dir, "depth", t, "bin"), pixels)?);
        let flow = FlowField::from_f32(cam.width, cam.height, &read_raster(&frame_path(dir, "flow", t, "bin"), 2 * pixels)?);
        frames.push(SyntheticFrame {
            index: t,
            view: View::new(cam, Point3::from(r.camera_center)),
            node_positions: r.node_positions.iter().map(|p| Point3::from(*p)).collect(),
            visibility: r.visibility,
            observed: r.observed,
            gt_motions: r.gt_motions.iter().map(|m| Motion3::from(*m)).collect(),
            visible_motions: r.visible_motions.iter().map(|m| m.map(Motion3::from)).collect(),
            depth,
            flow,
        });
    }
    let seq = Sequence {
        frames,
        pyramid,
        node_points: graph.surface_points,
        surface_frames: vec![surface.points.iter().map(|p| Point3::from(*p)).collect()],
        surface_normals: None,
        noise_sigma: meta.noise_sigma,
        extent: meta.extent,
        seed: meta.seed,
    };
    Ok((seq, meta))
}

/// Builds, writes and returns a sequence.
pub fn generate(spec: &AnimationSpec, config: &Config, seed: u64, out: &Path) -> Result<Sequence, PipelineError> {
    let anim = spec.animation(seed)?;
    let seq = generate_sequence(&anim, &config.sequence, seed)?;
    write_sequence(out, &seq, &config.sequence)?;
    Ok(seq)
}

// ---------------------------------------------------------------------------
// Prediction

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Rigid,
    Arap,
    ArapRefined,
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FramePrediction {
    /// Frame whose incoming motion is predicted (`≥ 1`).
    pub frame: usize,
    pub prediction: MotionPrediction,
}

/// Graph at frame `t − 1` with the canonical connectivity.
pub fn frame_pyramid(seq: &Sequence, t: usize, config: &Config) -> Result<GraphPyramid, PipelineError> {
    let base = NodeGraph {
        positions: seq.frames[t - 1].node_positions.clone(),
        edges: seq.pyramid.level(0).edges.clone(),
    };
    Ok(GraphPyramid::from_level0(base, &config.sequence.pyramid)?)
}

/// Predicts the motion into frame `t` from that frame's visible motions.
/// `base` is the prediction to refine (`ArapRefined`, defaults to rigid)
/// or to pass through (`External`).
pub fn predict_frame(
    seq: &Sequence,
    t: usize,
    method: Method,
    base: Option<&MotionPrediction>,
    config: &Config,
) -> Result<MotionPrediction, PipelineError> {
    let pyramid = frame_pyramid(seq, t, config)?;
    let frame = &seq.frames[t];
    let visible = frame.visible_motion_array();
    let mask = &frame.visibility;
    let graph = pyramid.level(0);
    let pred = match method {
        Method::Rigid => predict_rigid(graph, &visible, mask, config.rigid.occluded_sigma)?,
        Method::Arap => predict_arap(&pyramid, &visible, mask, &config.arap)?,
        Method::ArapRefined => {
            let start = match base {
                Some(b) => b.clone(),
                None => predict_rigid(graph, &visible, mask, config.rigid.occluded_sigma)?,
            };
            arap_refine(&pyramid, &start, mask, &visible, &config.arap)?
        }
        Method::External => {
            let b = base.ok_or_else(|| PipelineError::Usage("external method needs a prediction file".into()))?;
            if b.len() != graph.len() {
                return Err(MotionError::CountMismatch {
                    what: "prediction",
                    expected: graph.len(),
                    got: b.len(),
                }
                .into());
            }
            b.clone()
        }
    };
    Ok(pred)
}

pub fn predict_sequence(
    seq: &Sequence,
    method: Method,
    base: Option<&[FramePrediction]>,
    config: &Config,
) -> Result<Vec<FramePrediction>, PipelineError> {
    (1..seq.frames.len())
        .map(|t| {
            let b = base.and_then(|b| b.iter().find(|p| p.frame == t)).map(|p| &p.prediction);
            if base.is_some() && b.is_none() && method == Method::External {
                return Err(PipelineError::Usage(format!("no prediction for frame {t}")));
            }
            Ok(FramePrediction {
                frame: t,
                prediction: predict_frame(seq, t, method, b, config)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleEntry {
    pub frame: usize,
    #[serde(flatten)]
    pub prediction: PredictionFile,
}

/// All frames' predictions in one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionBundle {
    pub frames: Vec<BundleEntry>,
}

/// `.json` paths get a bundle; anything else is a directory of
/// `pred_%04d.csv` files.
pub fn write_prediction_set(path: &Path, preds: &[FramePrediction]) -> Result<(), PipelineError> {
    if is_json(path) {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        let bundle = PredictionBundle {
            frames: preds
                .iter()
                .map(|p| BundleEntry {
                    frame: p.frame,
                    prediction: PredictionFile::from(&p.prediction),
                })
                .collect(),
        };
        write_json(path, &bundle)?;
    } else {
        create_dir(path)?;
        for p in preds {
            let file = frame_path(path, "pred", p.frame, "csv");
            fs::write(&file, predictions_to_csv(&p.prediction)).map_err(|e| IoError::io(&file, e))?;
        }
    }
    Ok(())
}

/// Reads a bundle or a `pred_%04d.csv` directory for frames `1..frames`.
/// σ of external predictions (every CSV file) is truncated to `sigma_min`.
pub fn read_prediction_set(
    path: &Path,
    node_count: usize,
    frames: usize,
    sigma_min: f64,
) -> Result<Vec<FramePrediction>, PipelineError> {
    let mut out = Vec::with_capacity(frames.saturating_sub(1));
    if is_json(path) {
        let bundle: PredictionBundle = read_json(path)?;
        for e in bundle.frames {
            if e.frame == 0 || e.frame >= frames {
                return Err(PipelineError::invalid(path, format!("frame {} out of range", e.frame)));
            }
            let source = e.prediction.source;
            let mut prediction = e
                .prediction
                .into_prediction(node_count)
                .map_err(|err| PipelineError::invalid(path, format!("frame {}: {err}", e.frame)))?;
            prediction.source = source;
            if source == PredictionSource::External {
                for g in prediction.motions.iter_mut() {
                    g.sigma = truncate_sigma(g.sigma, sigma_min);
                }
            }
            out.push(FramePrediction { frame: e.frame, prediction });
        }
        out.sort_by_key(|p| p.frame);
        if out.windows(2).any(|w| w[0].frame == w[1].frame) {
            return Err(PipelineError::invalid(path, "duplicate frame"));
        }
    } else {
        for t in 1..frames {
            let file = frame_path(path, "pred", t, "csv");
            let prediction = load_external_predictions(&file, node_count, sigma_min).map_err(|e| match e {
                MotionError::Io(io) => PipelineError::Io(io),
                other => PipelineError::invalid(&file, other),
            })?;
            out.push(FramePrediction { frame: t, prediction });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Registration

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationRun {
    /// One field per frame; frame 0 is the identity.
    pub fields: Vec<WarpField>,
    /// Reports for frames `1..`.
    pub reports: Vec<EnergyReport>,
}

pub fn skin_surface(seq: &Sequence, config: &Config) -> Result<Vec<SkinnedVertex>, PipelineError> {
    Ok(skin_vertices(
        seq.surface(),
        seq.pyramid.level(0),
        config.skinning.anchors,
        config.skinning.radius,
    )?)
}

pub fn motion_targets(prediction: &MotionPrediction, config: &Config) -> MotionTargets {
    match config.weighting {
        Weighting::Confidence => MotionTargets::from_prediction(prediction, &config.arap.weight),
        Weighting::Uniform => MotionTargets::uniform(prediction),
    }
}

/// Tracks the canonical surface through the sequence, one solve per frame.
pub fn register_sequence(
    seq: &Sequence,
    predictions: Option<&[FramePrediction]>,
    config: &Config,
) -> Result<RegistrationRun, PipelineError> {
    let graph = seq.pyramid.level(0).clone();
    let vertices = skin_surface(seq, config)?;
    let mut fields = vec![WarpField::identity(graph)];
    let mut reports = Vec::new();
    for t in 1..seq.frames.len() {
        let (prev, cur) = (&seq.frames[t - 1], &seq.frames[t]);
        let field_prev = &fields[t - 1];
        let corr = build_correspondences(
            field_prev,
            &vertices,
            &cur.flow,
            &cur.depth,
            &prev.view,
            &cur.view,
            &config.correspondence,
        )?;
        let targets = match predictions {
            Some(p) => {
                let fp = p
                    .iter()
                    .find(|p| p.frame == t)
                    .ok_or_else(|| PipelineError::Usage(format!("no prediction for frame {t}")))?;
                Some(motion_targets(&fp.prediction, config))
            }
            None => None,
        };
        let inputs = RegistrationInputs {
            field_prev,
            correspondences: &corr,
            targets: targets.as_ref(),
            view: &cur.view,
        };
        let (field, report) = solve_warpfield(inputs, &config.weights, &config.solver)?;
        fields.push(field);
        reports.push(report);
    }
    Ok(RegistrationRun { fields, reports })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarpRecord {
    pub frame: usize,
    /// Per node: rotation as an axis-angle vector, then translation.
    pub rotations: Vec<[f64; 3]>,
    pub translations: Vec<[f64; 3]>,
}

impl WarpRecord {
    pub fn from_field(frame: usize, field: &WarpField) -> Self {
        Self {
            frame,
            rotations: field
                .transforms
                .iter()
                .map(|t| arr(&Rotation3::from_matrix_unchecked(t.rotation).scaled_axis()))
                .collect(),
            translations: field.transforms.iter().map(|t| arr(&t.translation)).collect(),
        }
    }

    pub fn into_field(self, graph: &NodeGraph) -> Result<WarpField, WarpError> {
        if self.rotations.len() != self.translations.len() {
            return Err(WarpError::CountMismatch {
                nodes: self.rotations.len(),
                transforms: self.translations.len(),
            });
        }
        let transforms = self
            .rotations
            .iter()
            .zip(&self.translations)
            .map(|(r, t)| RigidTransform::from_axis_angle(Point3::from(*r), Point3::from(*t)))
            .collect();
        WarpField::new(graph.clone(), transforms)
    }
}

pub fn write_registration(dir: &Path, run: &RegistrationRun) -> Result<(), PipelineError> {
    create_dir(dir)?;
    for (t, f) in run.fields.iter().enumerate() {
        write_json(&frame_path(dir, "warp", t, "json"), &WarpRecord::from_field(t, f))?;
    }
    for (t, r) in run.reports.iter().enumerate() {
        write_json(&frame_path(dir, "energy", t + 1, "json"), r)?;
    }
    Ok(())
}

pub fn read_warps(dir: &Path, graph: &NodeGraph, frames: usize) -> Result<Vec<WarpField>, PipelineError> {
    (0..frames)
        .map(|t| {
            let path = frame_path(dir, "warp", t, "json");
            let rec: WarpRecord = read_json(&path)?;
            rec.into_field(graph).map_err(|e| PipelineError::invalid(&path, e))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Evaluation

fn frame_metrics(frame: &SyntheticFrame, pred: &[Motion3]) -> Result<FrameMetrics, MetricError> {
    let occ = occluded_observed(&frame.visibility, &frame.observed);
    let all = VisibilityMask::all_visible(frame.gt_motions.len());
    Ok(FrameMetrics {
        frame: frame.index,
        epe_occluded_mm: match epe(pred, &frame.gt_motions, &occ) {
            Ok(v) => Some(v),
            Err(MetricError::EmptySelection) => None,
            Err(e) => return Err(e),
        },
        epe_all_mm: epe(pred, &frame.gt_motions, &all)?,
        occluded_nodes: occ.visible_count(),
        geometry_error_cm: None,
    })
}

pub fn evaluate_predictions(
    seq: &Sequence,
    preds: &[FramePrediction],
    config: &Config,
) -> Result<EvalReport, PipelineError> {
    let frames = preds
        .iter()
        .map(|p| {
            let frame = seq
                .frames
                .get(p.frame)
                .ok_or_else(|| PipelineError::Usage(format!("frame {} not in sequence", p.frame)))?;
            Ok(frame_metrics(frame, &p.prediction.mus())?)
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Ok(EvalReport::new(frames, config_echo(config)))
}

pub fn evaluate_warps(seq: &Sequence, fields: &[WarpField], config: &Config) -> Result<EvalReport, PipelineError> {
    if fields.len() != seq.frames.len() {
        return Err(MotionError::CountMismatch {
            what: "warp fields",
            expected: seq.frames.len(),
            got: fields.len(),
        }
        .into());
    }
    let vertices = skin_surface(seq, config)?;
    let mut out = Vec::with_capacity(fields.len().saturating_sub(1));
    for t in 1..fields.len() {
        let frame = &seq.frames[t];
        let motions = node_displacements(&fields[t - 1], &fields[t])?;
        let mut m = frame_metrics(frame, &motions)?;
        let warped = warp_points(&fields[t], &vertices);
        m.geometry_error_cm = match geometry_error(&warped, &frame.depth, &frame.view, &config.geometry) {
            Ok(g) => Some(g),
            Err(MetricError::NoValidVertices) => None,
            Err(e) => return Err(e.into()),
        };
        out.push(m);
    }
    Ok(EvalReport::new(out, config_echo(config)))
}

fn config_echo(config: &Config) -> serde_json::Value {
    serde_json::to_value(config).unwrap_or(serde_json::Value::Null)
}
