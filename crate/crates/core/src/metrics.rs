//! End-point error, geometry error and the evaluation report.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Motion3, Point3, View};
use crate::motion::VisibilityMask;
use crate::raster::{splat_depth, visibility, DepthImage};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("no node selected")]
    EmptySelection,
    #[error("{what}: expected {expected}, got {got}")]
    CountMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("no warped vertex lands on valid depth")]
    NoValidVertices,
}

/// Mean `‖predᵢ − gtᵢ‖` over the selected nodes, in millimeters.
pub fn epe(pred: &[Motion3], gt: &[Motion3], selection: &VisibilityMask) -> Result<f64, MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::CountMismatch {
            what: "prediction",
            expected: gt.len(),
            got: pred.len(),
        });
    }
    if selection.len() != gt.len() {
        return Err(MetricError::CountMismatch {
            what: "selection",
            expected: gt.len(),
            got: selection.len(),
        });
    }
    let idx = selection.visible_indices();
    if idx.is_empty() {
        return Err(MetricError::EmptySelection);
    }
    let sum: f64 = idx.iter().map(|&i| (pred[i] - gt[i]).norm()).sum();
    Ok(1000.0 * sum / idx.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometryParams {
    pub splat_radius: usize,
    pub visibility_tol: f64,
    pub normal_max_jump: f64,
}

impl Default for GeometryParams {
    fn default() -> Self {
        Self {
            splat_radius: 1,
            visibility_tol: 0.02,
            normal_max_jump: 0.05,
        }
    }
}

/// Mean absolute point-to-plane distance, in centimeters, from each visible
/// warped vertex to the depth surface at its pixel. A vertex is visible when
/// it survives both its own model's z-buffer and the input depth.
pub fn geometry_error(
    warped: &[Point3],
    depth: &DepthImage,
    view: &View,
    params: &GeometryParams,
) -> Result<f64, MetricError> {
    let zbuf = splat_depth(warped, view, params.splat_radius);
    let own = visibility(warped, &zbuf, view, params.visibility_tol);
    let input = visibility(warped, depth, view, params.visibility_tol);
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((p, a), b) in warped.iter().zip(&own.0).zip(&input.0) {
        if !(*a && *b) {
            continue;
        }
        let Ok((u, v)) = view.project(p) else { continue };
        let Some((x, y)) = view.camera.pixel(u, v) else { continue };
        let (Some(q), Some(n)) = (
            depth.point_at(view, x, y),
            depth.normal_at(view, x, y, params.normal_max_jump),
        ) else {
            continue;
        };
        sum += n.dot(&(p - q)).abs();
        count += 1;
    }
    if count == 0 {
        return Err(MetricError::NoValidVertices);
    }
    Ok(100.0 * sum / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    /// Over observed nodes that are hidden in this frame; absent when none.
    pub epe_occluded_mm: Option<f64>,
    pub epe_all_mm: f64,
    pub occluded_nodes: usize,
    pub geometry_error_cm: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub max: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        let mut s = Summary::default();
        let mut sum = 0.0;
        for v in values {
            sum += v;
            s.max = s.max.max(v);
            s.count += 1;
        }
        (s.count > 0).then(|| Summary {
            mean: sum / s.count as f64,
            ..s
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregates {
    pub epe_occluded_mm: Option<Summary>,
    pub epe_all_mm: Option<Summary>,
    pub geometry_error_cm: Option<Summary>,
}

impl Aggregates {
    pub fn from_frames(frames: &[FrameMetrics]) -> Self {
        Self {
            epe_occluded_mm: Summary::of(frames.iter().filter_map(|f| f.epe_occluded_mm)),
            epe_all_mm: Summary::of(frames.iter().map(|f| f.epe_all_mm)),
            geometry_error_cm: Summary::of(frames.iter().filter_map(|f| f.geometry_error_cm)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: Vec<FrameMetrics>,
    pub aggregates: Aggregates,
    /// Configuration the evaluated outputs were produced with.
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn new(frames: Vec<FrameMetrics>, config: serde_json::Value) -> Self {
        let aggregates = Aggregates::from_frames(&frames);
        Self {
            frames,
            aggregates,
            config,
        }
    }
}

/// Nodes in the observed set that are hidden in the current frame.
pub fn occluded_observed(visibility: &VisibilityMask, observed: &VisibilityMask) -> VisibilityMask {
    VisibilityMask(
        visibility
            .0
            .iter()
            .zip(&observed.0)
            .map(|(v, o)| *o && !*v)
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Camera;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn epe_examples() {
        let gt = vec![Motion3::new(0.01, 0.0, 0.0), Motion3::new(0.0, 0.02, 0.0)];
        let all = VisibilityMask::all_visible(2);
        assert_eq!(epe(&gt, &gt, &all).unwrap(), 0.0);
        let one = vec![Motion3::new(0.003, 0.0, 0.0)];
        assert_abs_diff_eq!(
            epe(&one, &[Motion3::zeros()], &VisibilityMask::all_visible(1)).unwrap(),
            3.0,
            epsilon = 1e-12
        );
        let pred = vec![gt[0] + Motion3::new(0.0, 0.003, 0.0), gt[1] + Motion3::new(0.0, 0.0, -0.005)];
        assert_abs_diff_eq!(epe(&pred, &gt, &all).unwrap(), 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            epe(&pred, &gt, &VisibilityMask(vec![false, true])).unwrap(),
            5.0,
            epsilon = 1e-12
        );
        assert_eq!(epe(&pred, &gt, &VisibilityMask(vec![false; 2])), Err(MetricError::EmptySelection));
        assert!(matches!(
            epe(&pred[..1], &gt, &all),
            Err(MetricError::CountMismatch { .. })
        ));
    }

    fn plane_scene() -> (View, DepthImage, Vec<Point3>) {
        let view = View::at_origin(Camera::new(100.0, 100.0, 32.0, 24.0, 64, 48).unwrap());
        let pts: Vec<Point3> = (-60..=60)
            .flat_map(|i| (-60..=60).map(move |j| Point3::new(i as f64 * 0.01, j as f64 * 0.01, 1.5)))
            .collect();
        let depth = splat_depth(&pts, &view, 1);
        let verts: Vec<Point3> = (-20..=20)
            .flat_map(|i| (-15..=15).map(move |j| Point3::new(i as f64 * 0.017, j as f64 * 0.017, 1.5)))
            .collect();
        (view, depth, verts)
    }

    #[test]
    fn geometry_error_examples() {
        let (view, depth, verts) = plane_scene();
        let p = GeometryParams::default();
        assert_abs_diff_eq!(geometry_error(&verts, &depth, &view, &p).unwrap(), 0.0, epsilon = 1e-12);
        let shifted: Vec<Point3> = verts.iter().map(|v| v + Motion3::new(0.0, 0.0, 0.01)).collect();
        assert_abs_diff_eq!(geometry_error(&shifted, &depth, &view, &p).unwrap(), 1.0, epsilon = 1e-9);
        let empty = DepthImage::empty(64, 48);
        assert_eq!(geometry_error(&verts, &empty, &view, &p), Err(MetricError::NoValidVertices));
    }

    #[test]
    fn aggregates_skip_missing_frames() {
        let frames = vec![
            FrameMetrics {
                frame: 1,
                epe_occluded_mm: Some(2.0),
                epe_all_mm: 1.0,
                occluded_nodes: 3,
                geometry_error_cm: None,
            },
            FrameMetrics {
                frame: 2,
                epe_occluded_mm: None,
                epe_all_mm: 3.0,
                occluded_nodes: 0,
                geometry_error_cm: None,
            },
        ];
        let a = Aggregates::from_frames(&frames);
        assert_eq!(a.epe_occluded_mm, Some(Summary { mean: 2.0, max: 2.0, count: 1 }));
        assert_eq!(a.epe_all_mm, Some(Summary { mean: 2.0, max: 3.0, count: 2 }));
        assert_eq!(a.geometry_error_cm, None);
    }

    proptest! {
        #[test]
        fn aggregates_match_recomputation(values in prop::collection::vec((0.0f64..50.0, prop::option::of(0.0f64..50.0)), 1..30)) {
            let frames: Vec<FrameMetrics> = values
                .iter()
                .enumerate()
                .map(|(i, (all, occ))| FrameMetrics {
                    frame: i + 1,
                    epe_occluded_mm: *occ,
                    epe_all_mm: *all,
                    occluded_nodes: usize::from(occ.is_some()),
                    geometry_error_cm: Some(all / 10.0),
                })
                .collect();
            let r = EvalReport::new(frames, serde_json::Value::Null);
            let all = r.aggregates.epe_all_mm.unwrap();
            let mean = values.iter().map(|v| v.0).sum::<f64>() / values.len() as f64;
            prop_assert!((all.mean - mean).abs() < 1e-9);
            prop_assert_eq!(all.max, values.iter().map(|v| v.0).fold(0.0, f64::max));
            let occ: Vec<f64> = values.iter().filter_map(|v| v.1).collect();
            match r.aggregates.epe_occluded_mm {
                None => prop_assert!(occ.is_empty()),
                Some(s) => {
                    prop_assert_eq!(s.count, occ.len());
                    prop_assert!((s.mean - occ.iter().sum::<f64>() / occ.len() as f64).abs() < 1e-9);
                }
            }
            prop_assert!(r.frames.iter().all(|f| f.epe_all_mm >= 0.0));
        }
    }
}
