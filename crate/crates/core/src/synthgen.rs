//! Synthetic sequences: articulated point-set animations seen by a virtual
//! depth camera, with node visibility, a growing observed set, noisy visible
//! motions and ground-truth flow.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Rotation3, Unit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Camera, GeomError, Motion3, Point3, Vec3, View};
use crate::motion::VisibilityMask;
use crate::pyramid::{sample_nodes, GraphPyramid, PyramidConfig, PyramidError};
use crate::raster::{splat_depth, splat_depth_ids, visibility, DepthImage, FlowField};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("bad animation spec: {0}")]
    BadSpec(String),
    #[error("animation has a degenerate extent")]
    DegenerateExtent,
    #[error("nothing visible in frame {0}")]
    NothingVisible(usize),
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// Per-frame positions of a point set with fixed topology.
#[derive(Debug, Clone, PartialEq)]
pub struct AnimationSource {
    pub frames: Vec<Vec<Point3>>,
    /// Optional per-point unit normals, same layout as `frames`.
    pub normals: Option<Vec<Vec<Vec3>>>,
    pub fps: f64,
}

impl AnimationSource {
    /// Imports externally supplied per-frame point sets.
    pub fn from_frames(frames: Vec<Vec<Point3>>, fps: f64) -> Result<Self, SynthError> {
        let n = frames.first().map_or(0, Vec::len);
        if frames.is_empty() || n == 0 {
            return Err(SynthError::BadSpec("no points".into()));
        }
        if let Some(f) = frames.iter().position(|f| f.len() != n) {
            return Err(SynthError::BadSpec(format!("frame {f} has {} points, expected {n}", frames[f].len())));
        }
        if !(fps > 0.0) {
            return Err(SynthError::BadSpec("fps must be positive".into()));
        }
        Ok(Self {
            frames,
            normals: None,
            fps,
        })
    }

    pub fn point_count(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    /// Axis-aligned bounds over every frame.
    pub fn bounds(&self) -> (Point3, Point3) {
        let mut lo = Point3::repeat(f64::INFINITY);
        let mut hi = Point3::repeat(f64::NEG_INFINITY);
        for p in self.frames.iter().flatten() {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (lo, hi)
    }
}

/// Joint angle over the sequence, radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AngleCurve {
    Constant { value: f64 },
    /// From `from` at the first frame to `to` at the last.
    Linear { from: f64, to: f64 },
    /// `offset + amplitude · sin(2π f / period + phase)`, `period` in frames.
    Sine {
        amplitude: f64,
        period: f64,
        phase: f64,
        #[serde(default)]
        offset: f64,
    },
    /// Evenly spaced over the sequence, linearly interpolated.
    Keyframes { values: Vec<f64> },
}

impl Default for AngleCurve {
    fn default() -> Self {
        AngleCurve::Constant { value: 0.0 }
    }
}

impl AngleCurve {
    pub fn eval(&self, frame: usize, frames: usize) -> f64 {
        let s = if frames > 1 {
            frame as f64 / (frames - 1) as f64
        } else {
            0.0
        };
        match self {
            AngleCurve::Constant { value } => *value,
            AngleCurve::Linear { from, to } => from + (to - from) * s,
            AngleCurve::Sine {
                amplitude,
                period,
                phase,
                offset,
            } => offset + amplitude * (2.0 * PI * frame as f64 / period + phase).sin(),
            AngleCurve::Keyframes { values } => match values.len() {
                0 => 0.0,
                1 => values[0],
                k => {
                    let x = s * (k - 1) as f64;
                    let i = (x.floor() as usize).min(k - 2);
                    let f = x - i as f64;
                    values[i] * (1.0 - f) + values[i + 1] * f
                }
            },
        }
    }

    fn is_valid(&self) -> bool {
        match self {
            AngleCurve::Sine { period, .. } => *period != 0.0 && period.is_finite(),
            _ => true,
        }
    }
}

/// A cylinder attached at its base to the tip of its parent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSpec {
    #[serde(default)]
    pub parent: Option<usize>,
    pub length: f64,
    pub radius: f64,
    /// Rest direction in the parent's frame (world frame for the root).
    pub direction: [f64; 3],
    /// Joint axis in the parent's frame (world frame for the root).
    pub axis: [f64; 3],
    #[serde(default)]
    pub angle: AngleCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArticulatedSpec {
    pub segments: Vec<SegmentSpec>,
    pub frames: usize,
    #[serde(default = "default_fps")]
    pub fps: f64,
    /// Surface sample spacing.
    pub spacing: f64,
    /// Length on each side of a joint over which the two segments blend.
    #[serde(default)]
    pub blend: f64,
    #[serde(default)]
    pub origin: [f64; 3],
    /// Root translation per frame.
    #[serde(default)]
    pub velocity: [f64; 3],
}

fn default_fps() -> f64 {
    30.0
}

#[derive(Debug, Clone, Copy)]
struct SurfaceSample {
    segment: usize,
    local: Vec3,
    normal: Vec3,
}

fn rest_rotation(direction: &Vec3) -> Matrix3<f64> {
    let d = direction.normalize();
    match Rotation3::rotation_between(&Vec3::x(), &d) {
        Some(r) => r.into_inner(),
        None => Rotation3::from_axis_angle(&Vec3::z_axis(), PI).into_inner(),
    }
}

fn axis_rotation(axis: &Vec3, angle: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle).into_inner()
}

impl ArticulatedSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::BadSpec(m));
        if self.segments.is_empty() {
            return bad("no segments".into());
        }
        if self.frames == 0 {
            return bad("no frames".into());
        }
        if !(self.spacing > 0.0) {
            return bad("spacing must be positive".into());
        }
        if !(self.blend >= 0.0) {
            return bad("blend must be nonnegative".into());
        }
        for (i, s) in self.segments.iter().enumerate() {
            match (i, s.parent) {
                (0, None) => {}
                (0, Some(_)) => return bad("segment 0 must be the root".into()),
                (_, None) => return bad(format!("segment {i} has no parent")),
                (_, Some(p)) if p >= i => return bad(format!("segment {i} must come after its parent")),
                _ => {}
            }
            if !(s.length > 0.0 && s.radius > 0.0) {
                return bad(format!("segment {i} needs positive length and radius"));
            }
            if Vec3::from(s.direction).norm() < 1e-12 || Vec3::from(s.axis).norm() < 1e-12 {
                return bad(format!("segment {i} has a zero direction or axis"));
            }
            if !s.angle.is_valid() {
                return bad(format!("segment {i} has an invalid angle curve"));
            }
        }
        Ok(())
    }

    fn first_child(&self, s: usize) -> Option<usize> {
        self.segments.iter().position(|c| c.parent == Some(s))
    }

    fn samples(&self) -> Vec<SurfaceSample> {
        let h = self.spacing;
        let mut out = Vec::new();
        for (si, s) in self.segments.iter().enumerate() {
            let rings = (s.length / h).ceil() as usize + 1;
            let around = ((2.0 * PI * s.radius / h).ceil() as usize).max(6);
            for a in 0..rings {
                let x = s.length * a as f64 / (rings - 1) as f64;
                // Staggered rings avoid aligned seams.
                let shift = if a % 2 == 0 { 0.0 } else { 0.5 };
                for b in 0..around {
                    let th = 2.0 * PI * (b as f64 + shift) / around as f64;
                    let normal = Vec3::new(0.0, th.cos(), th.sin());
                    out.push(SurfaceSample {
                        segment: si,
                        local: Vec3::new(x, 0.0, 0.0) + normal * s.radius,
                        normal,
                    });
                }
            }
            let mut caps = Vec::new();
            if si == 0 {
                caps.push((0.0, -1.0));
            }
            if self.first_child(si).is_none() {
                caps.push((s.length, 1.0));
            }
            for (x, sign) in caps {
                let discs = (s.radius / h).floor() as usize;
                for a in 0..discs {
                    let r = s.radius * a as f64 / discs as f64;
                    let count = if a == 0 { 1 } else { ((2.0 * PI * r / h).ceil() as usize).max(6) };
                    for b in 0..count {
                        let th = 2.0 * PI * b as f64 / count as f64;
                        out.push(SurfaceSample {
                            segment: si,
                            local: Vec3::new(x, r * th.cos(), r * th.sin()),
                            normal: Vec3::new(sign, 0.0, 0.0),
                        });
                    }
                }
            }
        }
        out
    }

    /// World base position, world orientation and joint rotation of every
    /// segment at `frame`.
    fn pose(&self, frame: usize) -> Vec<(Point3, Matrix3<f64>, Matrix3<f64>)> {
        let mut out: Vec<(Point3, Matrix3<f64>, Matrix3<f64>)> = Vec::with_capacity(self.segments.len());
        for s in &self.segments {
            let joint = axis_rotation(&Vec3::from(s.axis), s.angle.eval(frame, self.frames));
            let rest = rest_rotation(&Vec3::from(s.direction));
            let (base, frame_rot) = match s.parent {
                None => (
                    Point3::from(self.origin) + Vec3::from(self.velocity) * frame as f64,
                    Matrix3::identity(),
                ),
                Some(p) => {
                    let (pb, pr, _) = out[p];
                    (pb + pr * Vec3::new(self.segments[p].length, 0.0, 0.0), pr)
                }
            };
            out.push((base, frame_rot * joint * rest, joint));
        }
        out
    }

    fn place(&self, pose: &[(Point3, Matrix3<f64>, Matrix3<f64>)], s: &SurfaceSample) -> (Point3, Vec3) {
        let seg = &self.segments[s.segment];
        let (base, rot, _) = pose[s.segment];
        let b = self.blend;
        if b > 0.0 {
            if let Some(p) = seg.parent {
                if s.local.x < b {
                    // Blend toward the parent's rigid motion near the joint.
                    let w = 0.5 + 0.5 * s.local.x / b;
                    let (_, prot, _) = pose[p];
                    let (_, _, joint) = pose[s.segment];
                    let rest = rest_rotation(&Vec3::from(seg.direction));
                    let m = prot * (joint * w + Matrix3::identity() * (1.0 - w)) * rest;
                    let pos = base + m * s.local;
                    let n = (m * s.normal).normalize();
                    return (pos, n);
                }
            }
            if let Some(c) = self.first_child(s.segment) {
                if s.local.x > seg.length - b {
                    let w = 0.5 * (s.local.x - (seg.length - b)) / b;
                    let (_, _, cjoint) = pose[c];
                    let tip = Vec3::new(seg.length, 0.0, 0.0);
                    let m = cjoint * w + Matrix3::identity() * (1.0 - w);
                    let pos = base + rot * (tip + m * (s.local - tip));
                    let n = (rot * m * s.normal).normalize();
                    return (pos, n);
                }
            }
        }
        (base + rot * s.local, rot * s.normal)
    }
}

/// Animates the articulated surface; per-frame motion follows in closed form
/// from the joint curves.
pub fn make_articulated_animation(spec: &ArticulatedSpec) -> Result<AnimationSource, SynthError> {
    spec.validate()?;
    let samples = spec.samples();
    let mut frames = Vec::with_capacity(spec.frames);
    let mut normals = Vec::with_capacity(spec.frames);
    for f in 0..spec.frames {
        let pose = spec.pose(f);
        let (p, n): (Vec<Point3>, Vec<Vec3>) = samples.iter().map(|s| spec.place(&pose, s)).unzip();
        frames.push(p);
        normals.push(n);
    }
    Ok(AnimationSource {
        frames,
        normals: Some(normals),
        fps: spec.fps,
    })
}

/// Scales uniformly and recenters so the whole-sequence bounding box is
/// centered at the origin with its longest side equal to `extent`.
pub fn resize_to_extent(anim: &AnimationSource, extent: f64) -> Result<AnimationSource, SynthError> {
    let (lo, hi) = anim.bounds();
    let side = (hi - lo).max();
    if !(side > 0.0) || !side.is_finite() || !(extent > 0.0) {
        return Err(SynthError::DegenerateExtent);
    }
    let center = (lo + hi) * 0.5;
    let scale = extent / side;
    Ok(AnimationSource {
        frames: anim
            .frames
            .iter()
            .map(|f| f.iter().map(|p| (p - center) * scale).collect())
            .collect(),
        normals: anim.normals.clone(),
        fps: anim.fps,
    })
}

/// [`resize_to_extent`] with the extent drawn uniformly from `range`.
pub fn resize_to_box(anim: &AnimationSource, range: [f64; 2], seed: u64) -> Result<(AnimationSource, f64), SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extent = if range[1] > range[0] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    };
    Ok((resize_to_extent(anim, extent)?, extent))
}

/// Point-splat depth render; fails when no point lands in the image.
pub fn render_depth(points: &[Point3], view: &View, splat_radius: usize) -> Result<DepthImage, SynthError> {
    let img = splat_depth(points, view, splat_radius);
    if img.valid_count() == 0 {
        return Err(SynthError::NothingVisible(0));
    }
    Ok(img)
}

pub fn compute_visibility(nodes: &[Point3], depth: &DepthImage, view: &View, tol: f64) -> VisibilityMask {
    visibility(nodes, depth, view, tol)
}

/// Perturbs each motion with isotropic Gaussian noise of standard deviation
/// `sigma`.
pub fn perturb_motions<R: Rng>(motions: &[Option<Motion3>], sigma: f64, rng: &mut R) -> Vec<Option<Motion3>> {
    if !(sigma > 0.0) {
        return motions.to_vec();
    }
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    motions
        .iter()
        .map(|m| m.map(|m| m + Motion3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng))))
        .collect()
}

/// Draws `σ ~ U(0, sigma_max)` once and perturbs every present motion.
/// Returns the noised motions and the drawn σ.
pub fn add_motion_noise(motions: &[Option<Motion3>], seed: u64, sigma_max: f64) -> (Vec<Option<Motion3>>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = if sigma_max > 0.0 {
        rng.random_range(0.0..sigma_max)
    } else {
        0.0
    };
    (perturb_motions(motions, sigma, &mut rng), sigma)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CameraPolicy {
    /// One camera for the whole sequence; placed automatically when `center`
    /// is absent.
    Fixed {
        #[serde(default)]
        center: Option<[f64; 3]>,
    },
    /// Keeps the per-frame centroid on the optical axis at a fixed distance.
    TrackCentroid,
}

/// Static fronto-parallel rectangle rendered into the depth images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Occluder {
    pub center: [f64; 3],
    pub half_size: [f64; 2],
    #[serde(default = "default_occluder_spacing")]
    pub spacing: f64,
}

fn default_occluder_spacing() -> f64 {
    0.01
}

impl Occluder {
    pub fn points(&self) -> Vec<Point3> {
        let c = Point3::from(self.center);
        let h = self.spacing.max(1e-4);
        let nx = (2.0 * self.half_size[0] / h).ceil() as usize + 1;
        let ny = (2.0 * self.half_size[1] / h).ceil() as usize + 1;
        let mut out = Vec::with_capacity(nx * ny);
        for i in 0..nx {
            for j in 0..ny {
                let x = -self.half_size[0] + 2.0 * self.half_size[0] * i as f64 / (nx - 1).max(1) as f64;
                let y = -self.half_size[1] + 2.0 * self.half_size[1] * j as f64 / (ny - 1).max(1) as f64;
                out.push(c + Vec3::new(x, y, 0.0));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SequenceConfig {
    pub camera: Camera,
    pub camera_policy: CameraPolicy,
    /// Fraction of the half image the object may fill.
    pub frame_margin: f64,
    pub splat_radius: usize,
    pub visibility_tol: f64,
    pub pyramid: PyramidConfig,
    pub noise_sigma_max: f64,
    /// Bounding-box extent range for resizing; `None` keeps the input size.
    pub resize_range: Option<[f64; 2]>,
    pub occluders: Vec<Occluder>,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            camera: Camera {
                fx: 300.0,
                fy: 300.0,
                cx: 159.5,
                cy: 119.5,
                width: 320,
                height: 240,
            },
            camera_policy: CameraPolicy::TrackCentroid,
            frame_margin: 0.85,
            splat_radius: 1,
            visibility_tol: 0.02,
            pyramid: PyramidConfig::default(),
            noise_sigma_max: 0.004,
            resize_range: Some([1.0, 2.0]),
            occluders: Vec::new(),
        }
    }
}

/// Smallest distance along +z from `look_at` at which all `points` project
/// inside the central `margin` part of the image.
fn fit_distance<'a>(camera: &Camera, margin: f64, look_at: &Point3, points: impl Iterator<Item = &'a Point3>) -> f64 {
    let half_w = camera.cx.min(camera.width as f64 - 1.0 - camera.cx).max(1.0) * margin;
    let half_h = camera.cy.min(camera.height as f64 - 1.0 - camera.cy).max(1.0) * margin;
    let mut d: f64 = 0.1;
    for p in points {
        let q = p - look_at;
        d = d
            .max(q.x.abs() * camera.fx / half_w - q.z)
            .max(q.y.abs() * camera.fy / half_h - q.z)
            .max(0.1 - q.z);
    }
    d
}

/// Per-frame camera placement for `anim`.
pub fn place_views(anim: &AnimationSource, config: &SequenceConfig) -> Vec<View> {
    let cam = config.camera;
    match &config.camera_policy {
        CameraPolicy::Fixed { center: Some(c) } => vec![View::new(cam, Point3::from(*c)); anim.frame_count()],
        CameraPolicy::Fixed { center: None } => {
            let (lo, hi) = anim.bounds();
            let look = (lo + hi) * 0.5;
            let d = fit_distance(&cam, config.frame_margin, &look, anim.frames.iter().flatten());
            vec![View::new(cam, look - Vec3::new(0.0, 0.0, d)); anim.frame_count()]
        }
        CameraPolicy::TrackCentroid => {
            let centroids: Vec<Point3> = anim
                .frames
                .iter()
                .map(|f| f.iter().sum::<Point3>() / f.len() as f64)
                .collect();
            let d = anim
                .frames
                .iter()
                .zip(&centroids)
                .map(|(f, c)| fit_distance(&cam, config.frame_margin, c, f.iter()))
                .fold(0.0, f64::max);
            centroids
                .iter()
                .map(|c| View::new(cam, c - Vec3::new(0.0, 0.0, d)))
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFrame {
    pub index: usize,
    pub view: View,
    /// Ground-truth node positions.
    pub node_positions: Vec<Point3>,
    pub visibility: VisibilityMask,
    /// Nodes seen at least once up to this frame.
    pub observed: VisibilityMask,
    /// Ground-truth node displacement since the previous frame.
    pub gt_motions: Vec<Motion3>,
    /// Possibly noised motions, present exactly on visible nodes.
    pub visible_motions: Vec<Option<Motion3>>,
    pub depth: DepthImage,
    /// Flow from the previous frame's image to this one; zero at frame 0.
    pub flow: FlowField,
}

impl SyntheticFrame {
    /// Visible motions with zeros on occluded nodes.
    pub fn visible_motion_array(&self) -> Vec<Motion3> {
        self.visible_motions
            .iter()
            .map(|m| m.unwrap_or_else(Motion3::zeros))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub frames: Vec<SyntheticFrame>,
    /// Pyramid on the frame-0 node positions.
    pub pyramid: GraphPyramid,
    /// Surface point index of every node.
    pub node_points: Vec<usize>,
    /// Ground-truth surface per frame; frame 0 is the canonical model.
    pub surface_frames: Vec<Vec<Point3>>,
    pub surface_normals: Option<Vec<Vec<Vec3>>>,
    pub noise_sigma: f64,
    pub extent: Option<f64>,
    pub seed: u64,
}

impl Sequence {
    pub fn node_count(&self) -> usize {
        self.node_points.len()
    }

    pub fn surface(&self) -> &[Point3] {
        &self.surface_frames[0]
    }
}

/// Full generation pipeline: resize, camera placement, node sampling on the
/// first frame, rendering, visibility, observed-set growth, GT flow and
/// motion noise. All randomness derives from `seed`.
pub fn generate_sequence(anim: &AnimationSource, config: &SequenceConfig, seed: u64) -> Result<Sequence, SynthError> {
    if anim.frame_count() < 2 {
        return Err(SynthError::BadSpec("need at least two frames".into()));
    }
    config.camera.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let resize_seed: u64 = rng.random();
    let noise_seed: u64 = rng.random();

    let (anim, extent) = match config.resize_range {
        Some(range) => {
            let (a, e) = resize_to_box(anim, range, resize_seed)?;
            (a, Some(e))
        }
        None => (anim.clone(), None),
    };
    let views = place_views(&anim, config);

    let node_points = sample_nodes(&anim.frames[0], config.pyramid.intervals[0])?;
    let trajectories: Vec<Vec<Point3>> = anim
        .frames
        .iter()
        .map(|f| node_points.iter().map(|&i| f[i]).collect())
        .collect();
    let pyramid = GraphPyramid::from_nodes(trajectories[0].clone(), &config.pyramid, Some(&trajectories))?;

    let occluder_points: Vec<Point3> = config.occluders.iter().flat_map(Occluder::points).collect();
    let surface_count = anim.point_count();

    let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise_sigma = if config.noise_sigma_max > 0.0 {
        noise_rng.random_range(0.0..config.noise_sigma_max)
    } else {
        0.0
    };

    let n = node_points.len();
    let mut frames = Vec::with_capacity(anim.frame_count());
    let mut observed = VisibilityMask(vec![false; n]);
    let mut prev_ids: Vec<Option<usize>> = Vec::new();
    for (t, surface) in anim.frames.iter().enumerate() {
        let view = views[t];
        let mut scene = surface.clone();
        scene.extend_from_slice(&occluder_points);
        let (depth, ids) = splat_depth_ids(&scene, &view, config.splat_radius);
        if depth.valid_count() == 0 {
            return Err(SynthError::NothingVisible(t));
        }
        let nodes = &trajectories[t];
        let vis = visibility(nodes, &depth, &view, config.visibility_tol);
        for (o, v) in observed.0.iter_mut().zip(&vis.0) {
            *o |= *v;
        }
        let gt_motions: Vec<Motion3> = if t == 0 {
            vec![Motion3::zeros(); n]
        } else {
            nodes.iter().zip(&trajectories[t - 1]).map(|(a, b)| a - b).collect()
        };
        let exact: Vec<Option<Motion3>> = gt_motions
            .iter()
            .zip(&vis.0)
            .map(|(m, v)| v.then_some(*m))
            .collect();
        let visible_motions = if t == 0 {
            exact
        } else {
            perturb_motions(&exact, noise_sigma, &mut noise_rng)
        };

        let flow = if t == 0 {
            FlowField::zeros(view.camera.width, view.camera.height)
        } else {
            let prev_view = views[t - 1];
            let position = |id: usize, f: usize| -> Point3 {
                if id < surface_count {
                    anim.frames[f][id]
                } else {
                    occluder_points[id - surface_count]
                }
            };
            let data = prev_ids
                .iter()
                .map(|id| {
                    id.and_then(|id| {
                        let (u0, v0) = prev_view.project(&position(id, t - 1)).ok()?;
                        let (u1, v1) = view.project(&position(id, t)).ok()?;
                        Some([u1 - u0, v1 - v0])
                    })
                    .unwrap_or([0.0, 0.0])
                })
                .collect();
            FlowField {
                width: view.camera.width,
                height: view.camera.height,
                data,
            }
        };
        prev_ids = ids;

        frames.push(SyntheticFrame {
            index: t,
            view,
            node_positions: nodes.clone(),
            visibility: vis,
            observed: observed.clone(),
            gt_motions,
            visible_motions,
            depth,
            flow,
        });
    }

    Ok(Sequence {
        frames,
        pyramid,
        node_points,
        surface_frames: anim.frames,
        surface_normals: anim.normals,
        noise_sigma,
        extent,
        seed,
    })
}

fn random_unit<R: Rng>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.2 && n <= 1.0 {
            return v / n;
        }
    }
}

/// A random chain or small tree of `segments` cylinders with sinusoidal
/// joints and a slowly drifting root.
pub fn random_articulated_spec<R: Rng>(rng: &mut R, segments: usize, frames: usize) -> ArticulatedSpec {
    let mut out = Vec::with_capacity(segments);
    for i in 0..segments.max(1) {
        let parent = if i == 0 {
            None
        } else if i >= 2 && rng.random_bool(0.3) {
            Some(rng.random_range(0..i - 1))
        } else {
            Some(i - 1)
        };
        let direction = if i == 0 {
            random_unit(rng).into()
        } else {
            let a: f64 = rng.random_range(0.0..1.0);
            let b: f64 = rng.random_range(0.0..2.0 * PI);
            [a.cos(), a.sin() * b.cos(), a.sin() * b.sin()]
        };
        let d = Vec3::from(direction);
        // Joint axes roughly perpendicular to the segment bend it visibly.
        let axis = {
            let r = random_unit(rng);
            let perp = r - d.normalize() * r.dot(&d.normalize());
            if perp.norm() > 1e-3 { perp.normalize() } else { Vec3::z() }
        };
        let angle = if i == 0 {
            AngleCurve::Sine {
                amplitude: rng.random_range(0.05..0.2),
                period: rng.random_range(40.0..80.0),
                phase: rng.random_range(0.0..2.0 * PI),
                offset: 0.0,
            }
        } else {
            AngleCurve::Sine {
                amplitude: rng.random_range(0.3..0.8),
                period: rng.random_range(20.0..50.0),
                phase: rng.random_range(0.0..2.0 * PI),
                offset: rng.random_range(-0.3..0.3),
            }
        };
        out.push(SegmentSpec {
            parent,
            length: rng.random_range(0.35..0.6),
            radius: rng.random_range(0.025..0.04),
            direction,
            axis: axis.into(),
            angle,
        });
    }
    let v = random_unit(rng) * rng.random_range(0.0..0.01);
    ArticulatedSpec {
        segments: out,
        frames,
        fps: 30.0,
        spacing: 0.012,
        blend: 0.04,
        origin: [0.0; 3],
        velocity: v.into(),
    }
}

/// Two-segment arm whose forearm swings down behind a static plate and
/// stays there: visible for the first frames, then hidden for
/// `frames − swing_frames − 1` frames while the upper arm keeps moving.
pub fn occluded_limb_scenario<R: Rng>(rng: &mut R, frames: usize) -> (ArticulatedSpec, SequenceConfig) {
    let swing_frames = 5usize;
    let down = -PI / 2.0 + rng.random_range(-0.15..0.15);
    let wobble = rng.random_range(0.1..0.25);
    let period = rng.random_range(8.0..16.0);
    let phase = rng.random_range(0.0..2.0 * PI);
    let values = (0..frames)
        .map(|f| {
            if f <= swing_frames {
                down * f as f64 / swing_frames as f64
            } else {
                down + wobble * (2.0 * PI * (f - swing_frames) as f64 / period + phase).sin() * (1.0 - (-((f - swing_frames) as f64) / 3.0).exp())
            }
        })
        .collect();
    let speed = rng.random_range(0.01..0.02);
    let heading = rng.random_range(-0.5..0.5f64);
    let upper = rng.random_range(0.5..0.65);
    let spec = ArticulatedSpec {
        segments: vec![
            SegmentSpec {
                parent: None,
                length: upper,
                radius: 0.06,
                direction: [1.0, 0.0, 0.0],
                axis: [0.0, 0.0, 1.0],
                angle: AngleCurve::Sine {
                    amplitude: rng.random_range(0.02..0.06),
                    period: rng.random_range(15.0..30.0),
                    phase: rng.random_range(0.0..2.0 * PI),
                    offset: 0.0,
                },
            },
            SegmentSpec {
                parent: Some(0),
                length: rng.random_range(0.35..0.45),
                radius: 0.05,
                direction: [1.0, 0.0, 0.0],
                axis: [0.0, 0.0, -1.0],
                angle: AngleCurve::Keyframes { values },
            },
        ],
        frames,
        fps: 30.0,
        spacing: 0.012,
        blend: 0.03,
        origin: [0.0; 3],
        velocity: [speed * heading.cos(), 0.0, speed * heading.sin()],
    };
    // Image y points down, so the forearm hangs toward +y.
    let travel = speed * frames as f64;
    let config = SequenceConfig {
        camera_policy: CameraPolicy::Fixed {
            center: Some([0.35 + 0.5 * travel, 0.1, -2.2]),
        },
        resize_range: None,
        occluders: vec![Occluder {
            center: [0.35 + upper + 0.5 * travel, 0.5, -0.4],
            half_size: [0.45 + 0.5 * travel, 0.42],
            spacing: 0.008,
        }],
        ..SequenceConfig::default()
    };
    (spec, config)
}
