//! Deterministic clause-by-clause instruction executor.

use super::grammar::{parse_instruction, Clause, Landmark};
use super::scene::{cell_center, Scene};
use super::trajectory::{apply_action, ActionKind, Pose};

/// Success radius: 1.5 cell radii of a 1 m cell.
pub const SUCCESS_RADIUS: f64 = 0.75;
const MAX_GO_TOWARD: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct FollowResult {
    pub success: bool,
    pub path_length: f64,
    pub end_pose: Pose,
    /// Clauses that did not parse.
    pub skipped: usize,
    /// Landmark clauses with no visible matching object.
    pub ungrounded: usize,
}

/// Nearest object in line of sight matching the phrase; ties go to the
/// smaller bearing from the current heading.
pub fn ground(scene: &Scene, pose: &Pose, lm: &Landmark) -> Option<usize> {
    let p = pose.xy();
    let mut best: Option<(f64, f64, usize)> = None;
    for (i, o) in scene.objects.iter().enumerate() {
        if o.color != lm.color || o.category != lm.category {
            continue;
        }
        let c = (o.center[0], o.center[1]);
        if !scene.line_of_sight(p, c) {
            continue;
        }
        let d = ((c.0 - p.0).powi(2) + (c.1 - p.1).powi(2)).sqrt();
        let bearing = ((c.1 - p.1).atan2(c.0 - p.0) - pose.heading + std::f64::consts::PI)
            .rem_euclid(2.0 * std::f64::consts::PI)
            - std::f64::consts::PI;
        let key = (d, bearing.abs(), i);
        if best.is_none_or(|b| (key.0, key.1) < (b.0, b.1)) {
            best = Some(key);
        }
    }
    best.map(|b| b.2)
}

fn forward(scene: &Scene, pose: &mut Pose, path: &mut f64) -> bool {
    match scene.step(pose.cell(), pose.dir()) {
        Some(_) => {
            *pose = apply_action(pose, ActionKind::Forward);
            *path += 1.0;
            true
        }
        None => false,
    }
}

pub fn follow_instruction<S: AsRef<str>>(scene: &Scene, start: &Pose, tokens: &[S]) -> FollowResult {
    let (clauses, skipped) = parse_instruction(tokens);
    let mut pose = *start;
    let mut path = 0.0;
    let mut ungrounded = 0;
    for c in clauses {
        match c {
            Clause::Forward => {
                forward(scene, &mut pose, &mut path);
            }
            Clause::TurnLeft => pose = apply_action(&pose, ActionKind::TurnLeft),
            Clause::TurnRight => pose = apply_action(&pose, ActionKind::TurnRight),
            Clause::Stop => break,
            Clause::StopAt(l) => {
                if ground(scene, &pose, &l).is_none() {
                    ungrounded += 1;
                }
                break;
            }
            Clause::Pass(l) => {
                if ground(scene, &pose, &l).is_none() {
                    ungrounded += 1;
                }
            }
            Clause::GoToward(l) => {
                if ground(scene, &pose, &l).is_none() {
                    ungrounded += 1;
                    continue;
                }
                for _ in 0..MAX_GO_TOWARD {
                    if !forward(scene, &mut pose, &mut path) {
                        break;
                    }
                }
            }
        }
    }
    let (gx, gy) = cell_center(scene.goal);
    let (x, y) = pose.xy();
    FollowResult {
        success: ((x - gx).powi(2) + (y - gy).powi(2)).sqrt() <= SUCCESS_RADIUS,
        path_length: path,
        end_pose: pose,
        skipped,
        ungrounded,
    }
}

/// Path-length weighted success: `success · shortest / max(shortest, taken)`.
pub fn spl(success: bool, shortest: f64, taken: f64) -> f64 {
    if !success {
        return 0.0;
    }
    let denom = shortest.max(taken);
    if denom == 0.0 {
        1.0
    } else {
        shortest / denom
    }
}
