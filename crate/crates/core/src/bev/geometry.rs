//! Lifting BEV cells to 3D reference points and projecting them into the
//! camera rig.

use super::BevConfig;
use crate::simworld::{CameraModel, Pose};

/// A reference point visible in one camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjPoint {
    pub query: usize,
    pub camera: usize,
    pub ref_index: usize,
    /// Feature-grid texel coordinates (column, row).
    pub u: f64,
    pub v: f64,
    /// Camera-frame forward depth, meters.
    pub depth: f64,
}

/// All visible `(query, camera, reference)` triples of one pose, ordered
/// camera-major, then query, then reference.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePlan {
    pub queries: usize,
    pub cameras: usize,
    pub n_ref: usize,
    pub points: Vec<ProjPoint>,
    /// Point index for each slot `(q, k, n)`, flattened as `(q·K + k)·N_ref + n`.
    pub slot_point: Vec<Option<usize>>,
}

/// World coordinates of an ego-frame point `(forward, left, up)`, with
/// `up` measured from the camera mount height.
pub fn ego_to_world(pose: &Pose, forward: f64, left: f64, up: f64, mount: f64) -> [f64; 3] {
    let (s, c) = pose.heading.sin_cos();
    [
        pose.position[0] + forward * c - left * s,
        pose.position[1] + forward * s + left * c,
        pose.position[2] + mount + up,
    ]
}

/// Inverse of [`ego_to_world`] for the horizontal axes: `(forward, left)`.
pub fn world_to_ego(pose: &Pose, x: f64, y: f64) -> (f64, f64) {
    let (s, c) = pose.heading.sin_cos();
    let (dx, dy) = (x - pose.position[0], y - pose.position[1]);
    (dx * c + dy * s, -dx * s + dy * c)
}

/// Pixel coordinates and forward depth of a world point, or `None` when it
/// is behind the camera or outside the frustum.
pub fn project_reference_point(p: [f64; 3], cam: &CameraModel, pose: &Pose) -> Option<(f64, f64, f64)> {
    cam.project(p, pose)
}

impl SamplePlan {
    pub fn build(cfg: &BevConfig, cams: &[CameraModel], pose: &Pose, patch: usize) -> SamplePlan {
        let q_count = cfg.queries();
        let heights = cfg.ref_heights();
        let k_count = cams.len();
        let mut points = Vec::new();
        let mut slot_point = vec![None; q_count * k_count * cfg.n_ref];
        let pf = patch as f64;
        for (k, cam) in cams.iter().enumerate() {
            for q in 0..q_count {
                let (fx, ly) = cfg.cell_center(q);
                for (n, &z) in heights.iter().enumerate() {
                    let p = ego_to_world(pose, fx, ly, z, cam.mount_height);
                    if let Some((u, v, depth)) = project_reference_point(p, cam, pose) {
                        slot_point[(q * k_count + k) * cfg.n_ref + n] = Some(points.len());
                        points.push(ProjPoint {
                            query: q,
                            camera: k,
                            ref_index: n,
                            u: u / pf - 0.5,
                            v: v / pf - 0.5,
                            depth,
                        });
                    }
                }
            }
        }
        SamplePlan {
            queries: q_count,
            cameras: k_count,
            n_ref: cfg.n_ref,
            points,
            slot_point,
        }
    }

    /// Number of visible points per query.
    pub fn visible_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.queries];
        for p in &self.points {
            c[p.query] += 1;
        }
        c
    }

    /// Points belonging to camera `k`, as a contiguous index range.
    pub fn camera_range(&self, k: usize) -> std::ops::Range<usize> {
        let start = self.points.partition_point(|p| p.camera < k);
        let end = self.points.partition_point(|p| p.camera <= k);
        start..end
    }
}
