//! Pinhole camera rig and exact 2.5D raycasting.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::scene::Scene;
use super::trajectory::Pose;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub n_views: usize,
    pub image_w: usize,
    pub image_h: usize,
    pub fov_deg: f64,
    pub mount_height: f64,
    pub max_range: f64,
}

impl Default for CameraRig {
    fn default() -> Self {
        CameraRig {
            n_views: 4,
            image_w: 32,
            image_h: 32,
            fov_deg: 90.0,
            mount_height: 1.5,
            max_range: 10.0,
        }
    }
}

impl CameraRig {
    pub fn validate(&self) -> Result<()> {
        if self.n_views == 0 || self.image_w == 0 || self.image_h == 0 {
            return Err(Error::Config("camera rig needs views and pixels".into()));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::Config(format!("fov {} out of (0, 180)", self.fov_deg)));
        }
        if !(self.max_range > 0.0) {
            return Err(Error::Config("max_range must be positive".into()));
        }
        Ok(())
    }

    /// Cameras at headings `k·2π/K`; view `k+1` in action indexing.
    pub fn cameras(&self) -> Vec<CameraModel> {
        let focal = (self.image_w as f64 / 2.0) / (self.fov_deg.to_radians() / 2.0).tan();
        (0..self.n_views)
            .map(|k| CameraModel {
                focal,
                cx: self.image_w as f64 / 2.0,
                cy: self.image_h as f64 / 2.0,
                width: self.image_w as f64,
                height: self.image_h as f64,
                heading_offset: k as f64 * 2.0 * PI / self.n_views as f64,
                mount_height: self.mount_height,
            })
            .collect()
    }
}

/// Pinhole camera. The camera frame has forward along the heading, `u`
/// growing to the right and `v` growing downward.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
    pub heading_offset: f64,
    pub mount_height: f64,
}

type V3 = [f64; 3];

impl CameraModel {
    pub fn heading(&self, pose: &Pose) -> f64 {
        (pose.heading + self.heading_offset).rem_euclid(2.0 * PI)
    }

    /// (origin, forward, right, down) in world coordinates.
    pub fn frame(&self, pose: &Pose) -> (V3, V3, V3, V3) {
        let h = pose.heading + self.heading_offset;
        let (s, c) = h.sin_cos();
        let o = [pose.position[0], pose.position[1], pose.position[2] + self.mount_height];
        (o, [c, s, 0.0], [s, -c, 0.0], [0.0, 0.0, -1.0])
    }

    /// Pixel coordinates and forward depth of a world point, or `None`
    /// when it is behind the camera or outside the image.
    pub fn project(&self, p: V3, pose: &Pose) -> Option<(f64, f64, f64)> {
        let (o, f, r, d) = self.frame(pose);
        let rel = [p[0] - o[0], p[1] - o[1], p[2] - o[2]];
        let dot = |a: V3| a[0] * rel[0] + a[1] * rel[1] + a[2] * rel[2];
        let z = dot(f);
        if z <= 1e-9 {
            return None;
        }
        let u = self.focal * dot(r) / z + self.cx;
        let v = self.focal * dot(d) / z + self.cy;
        if u < 0.0 || u > self.width || v < 0.0 || v > self.height {
            return None;
        }
        Some((u, v, z))
    }

    /// Inverse of [`project`](Self::project).
    pub fn unproject(&self, u: f64, v: f64, depth: f64, pose: &Pose) -> V3 {
        let (o, f, r, d) = self.frame(pose);
        let a = (u - self.cx) / self.focal * depth;
        let b = (v - self.cy) / self.focal * depth;
        [0, 1, 2].map(|i| o[i] + depth * f[i] + a * r[i] + b * d[i])
    }

    /// Ray through the center of pixel `(row, col)`; the direction has unit
    /// forward component, so the ray parameter equals forward depth.
    pub fn pixel_ray(&self, pose: &Pose, row: usize, col: usize) -> (V3, V3) {
        let (o, f, r, d) = self.frame(pose);
        let a = (col as f64 + 0.5 - self.cx) / self.focal;
        let b = (row as f64 + 0.5 - self.cy) / self.focal;
        (o, [0, 1, 2].map(|i| f[i] + a * r[i] + b * d[i]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderedView {
    pub width: usize,
    pub height: usize,
    /// 0 = free space / structure, `c + 1` for object category `c`.
    pub category: Vec<u8>,
    /// 0 = none, `k + 1` for object color `k`.
    pub color: Vec<u8>,
    /// Ray length to the first hit in meters (max range on a miss).
    pub depth: Vec<f64>,
    /// Forward (camera-axis) depth of the same hit.
    pub forward_depth: Vec<f64>,
    /// Absolute view heading and elevation.
    pub heading: f64,
    pub elevation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub step: usize,
    pub views: Vec<RenderedView>,
}

enum Hit {
    Structure,
    Object(usize),
}

/// First intersection of `o + t·d` (t > 0) with floor, walls and boxes.
fn cast(scene: &Scene, o: V3, d: V3) -> Option<(f64, Hit)> {
    const EPS: f64 = 1e-12;
    let mut best: Option<(f64, Hit)> = None;
    let mut consider = |t: f64, h: Hit| {
        if t > EPS && best.as_ref().is_none_or(|(b, _)| t < *b) {
            best = Some((t, h));
        }
    };
    if d[2] < 0.0 {
        consider(-o[2] / d[2], Hit::Structure);
    }
    for w in &scene.walls {
        let t = if w.x0 == w.x1 {
            if d[0] == 0.0 {
                continue;
            }
            let t = (w.x0 - o[0]) / d[0];
            let y = o[1] + t * d[1];
            if y < w.y0 || y > w.y1 {
                continue;
            }
            t
        } else {
            if d[1] == 0.0 {
                continue;
            }
            let t = (w.y0 - o[1]) / d[1];
            let x = o[0] + t * d[0];
            if x < w.x0 || x > w.x1 {
                continue;
            }
            t
        };
        let z = o[2] + t * d[2];
        if (0.0..=scene.wall_height).contains(&z) {
            consider(t, Hit::Structure);
        }
    }
    for (i, obj) in scene.objects.iter().enumerate() {
        let (lo, hi) = (obj.min(), obj.max());
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        let mut miss = false;
        for a in 0..3 {
            if d[a] == 0.0 {
                if o[a] < lo[a] || o[a] > hi[a] {
                    miss = true;
                    break;
                }
            } else {
                let (ta, tb) = ((lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]);
                t0 = t0.max(ta.min(tb));
                t1 = t1.min(ta.max(tb));
            }
        }
        if !miss && t0 <= t1 && t1 > EPS {
            consider(if t0 > EPS { t0 } else { t1 }, Hit::Object(i));
        }
    }
    best
}

fn inside(scene: &Scene, pose: &Pose) -> bool {
    let [x0, y0, x1, y1] = scene.bounds;
    let (x, y) = pose.xy();
    x > x0 && x < x1 && y > y0 && y < y1
}

pub fn render_view(scene: &Scene, pose: &Pose, cam: &CameraModel, rig: &CameraRig) -> RenderedView {
    let (w, h) = (rig.image_w, rig.image_h);
    let n = w * h;
    let mut view = RenderedView {
        width: w,
        height: h,
        category: vec![0; n],
        color: vec![0; n],
        depth: vec![rig.max_range; n],
        forward_depth: vec![rig.max_range; n],
        heading: cam.heading(pose),
        elevation: pose.elevation,
    };
    for row in 0..h {
        for col in 0..w {
            let (o, d) = cam.pixel_ray(pose, row, col);
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let idx = row * w + col;
            match cast(scene, o, d) {
                Some((t, hit)) if t * norm <= rig.max_range => {
                    view.depth[idx] = t * norm;
                    view.forward_depth[idx] = t;
                    if let Hit::Object(i) = hit {
                        let obj = &scene.objects[i];
                        view.category[idx] = (obj.category + 1) as u8;
                        view.color[idx] = (obj.color + 1) as u8;
                    }
                }
                _ => view.forward_depth[idx] = rig.max_range / norm,
            }
        }
    }
    view
}

/// Renders all rig views from `pose`.
pub fn render_observation(scene: &Scene, pose: &Pose, rig: &CameraRig, step: usize) -> Result<Observation> {
    if !inside(scene, pose) {
        return Err(Error::Invalid(format!("pose {:?} outside scene bounds", pose.position)));
    }
    let views = rig.cameras().iter().map(|c| render_view(scene, pose, c, rig)).collect();
    Ok(Observation { step, views })
}
