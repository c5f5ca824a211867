//! Depth and flow images, point-splat rendering and depth normals.

use crate::geom::{Point3, Vec3, View};
use crate::motion::VisibilityMask;

/// Row-major depth buffer in meters; `0` means no surface.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthImage {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|d| **d > 0.0).count()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&d| d as f32).collect()
    }

    pub fn from_f32(width: usize, height: usize, data: &[f32]) -> Self {
        Self {
            width,
            height,
            data: data.iter().map(|&d| d as f64).collect(),
        }
    }

    /// World point seen at the center of pixel `(x, y)`.
    pub fn point_at(&self, view: &View, x: usize, y: usize) -> Option<Point3> {
        let d = self.get(x, y);
        if d > 0.0 {
            view.backproject(x as f64, y as f64, d).ok()
        } else {
            None
        }
    }

    /// Unit surface normal at pixel `(x, y)` from central differences of
    /// backprojected neighbors, oriented toward the camera. Neighbors whose
    /// depth differs by more than `max_jump` are treated as missing; a
    /// missing side falls back to a one-sided difference.
    pub fn normal_at(&self, view: &View, x: usize, y: usize, max_jump: f64) -> Option<Vec3> {
        let center = self.point_at(view, x, y)?;
        let d0 = self.get(x, y);
        let sample = |xx: isize, yy: isize| -> Option<Point3> {
            if xx < 0 || yy < 0 || xx as usize >= self.width || yy as usize >= self.height {
                return None;
            }
            let (xx, yy) = (xx as usize, yy as usize);
            let d = self.get(xx, yy);
            if d <= 0.0 || (d - d0).abs() > max_jump {
                return None;
            }
            self.point_at(view, xx, yy)
        };
        let diff = |a: Option<Point3>, b: Option<Point3>| -> Option<Vec3> {
            match (a, b) {
                (Some(a), Some(b)) => Some(a - b),
                (Some(a), None) => Some(a - center),
                (None, Some(b)) => Some(center - b),
                (None, None) => None,
            }
        };
        let (xi, yi) = (x as isize, y as isize);
        let du = diff(sample(xi + 1, yi), sample(xi - 1, yi))?;
        let dv = diff(sample(xi, yi + 1), sample(xi, yi - 1))?;
        let n = du.cross(&dv);
        let len = n.norm();
        if !(len > 0.0) {
            return None;
        }
        let n = n / len;
        let to_camera = view.center - center;
        Some(if n.dot(&to_camera) < 0.0 { -n } else { n })
    }
}

/// Row-major per-pixel 2D displacement `(du, dv)` in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 2]>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![[0.0; 2]; width * height],
        }
    }

    pub fn uniform(width: usize, height: usize, flow: [f64; 2]) -> Self {
        Self {
            width,
            height,
            data: vec![flow; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 2] {
        self.data[y * self.width + x]
    }

    /// Bilinear lookup at continuous pixel coordinates; `None` outside the
    /// grid of pixel centers.
    pub fn sample(&self, u: f64, v: f64) -> Option<[f64; 2]> {
        if !(u >= 0.0 && v >= 0.0) || u > (self.width - 1) as f64 || v > (self.height - 1) as f64 {
            return None;
        }
        let x0 = (u.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (v.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let (fx, fy) = (u - x0 as f64, v - y0 as f64);
        let mut out = [0.0; 2];
        for (c, o) in out.iter_mut().enumerate() {
            let a = self.get(x0, y0)[c] * (1.0 - fx) + self.get(x1, y0)[c] * fx;
            let b = self.get(x0, y1)[c] * (1.0 - fx) + self.get(x1, y1)[c] * fx;
            *o = a * (1.0 - fy) + b * fy;
        }
        Some(out)
    }

    /// Interleaved `u, v` channels.
    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().flat_map(|f| [f[0] as f32, f[1] as f32]).collect()
    }

    pub fn from_f32(width: usize, height: usize, data: &[f32]) -> Self {
        Self {
            width,
            height,
            data: data.chunks_exact(2).map(|c| [c[0] as f64, c[1] as f64]).collect(),
        }
    }
}

/// Z-buffer splat of points: each point covers a `(2r+1)²` pixel square
/// around its projection and the nearest depth wins.
pub fn splat_depth(points: &[Point3], view: &View, splat_radius: usize) -> DepthImage {
    splat_depth_ids(points, view, splat_radius).0
}

/// [`splat_depth`] plus, per pixel, the index of the winning point.
pub fn splat_depth_ids(points: &[Point3], view: &View, splat_radius: usize) -> (DepthImage, Vec<Option<usize>>) {
    let cam = &view.camera;
    let mut img = DepthImage::empty(cam.width, cam.height);
    let mut ids = vec![None; cam.width * cam.height];
    let r = splat_radius as isize;
    for (id, p) in points.iter().enumerate() {
        let z = view.depth_of(p);
        let Ok((u, v)) = view.project(p) else { continue };
        let (cx, cy) = ((u + 0.5).floor(), (v + 0.5).floor());
        if !cx.is_finite() || !cy.is_finite() {
            continue;
        }
        let (cx, cy) = (cx as isize, cy as isize);
        for y in cy - r..=cy + r {
            if y < 0 || y >= cam.height as isize {
                continue;
            }
            for x in cx - r..=cx + r {
                if x < 0 || x >= cam.width as isize {
                    continue;
                }
                let k = y as usize * cam.width + x as usize;
                if img.data[k] == 0.0 || z < img.data[k] {
                    img.data[k] = z;
                    ids[k] = Some(id);
                }
            }
        }
    }
    (img, ids)
}

/// Visible iff the point projects inside the image and is no more than `tol`
/// behind the rendered depth there. Pixels without a surface do not occlude.
pub fn visibility(points: &[Point3], depth: &DepthImage, view: &View, tol: f64) -> VisibilityMask {
    VisibilityMask(
        points
            .iter()
            .map(|p| {
                let Ok((u, v)) = view.project(p) else { return false };
                let Some((x, y)) = view.camera.pixel(u, v) else { return false };
                let d = depth.get(x, y);
                d == 0.0 || view.depth_of(p) <= d + tol
            })
            .collect(),
    )
}
