//! Poses, discrete actions and shortest-path trajectory sampling.

use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{cell_center, Scene};
use super::{mix_seed, Cell, DIRS};
use crate::error::{Error, Result};

pub const MIN_STEPS: usize = 3;
pub const MAX_STEPS: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: [f64; 3],
    /// Radians in `[0, 2π)`, counter-clockwise from +x.
    pub heading: f64,
    pub elevation: f64,
}

impl Pose {
    /// Agent standing at a cell center facing one of the four grid headings.
    pub fn at_cell(c: Cell, dir: usize) -> Pose {
        let (x, y) = cell_center(c);
        Pose {
            position: [x, y, 0.0],
            heading: (dir % 4) as f64 * FRAC_PI_2,
            elevation: 0.0,
        }
    }

    pub fn cell(&self) -> Cell {
        (self.position[0].floor() as usize, self.position[1].floor() as usize)
    }

    pub fn dir(&self) -> usize {
        ((self.heading / FRAC_PI_2).round() as usize) % 4
    }

    pub fn xy(&self) -> (f64, f64) {
        (self.position[0], self.position[1])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionKind {
    Forward,
    TurnLeft,
    TurnRight,
    Stop,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionStep {
    pub kind: ActionKind,
    /// View the action points at: 1 front, 2 left, 4 right; 0 for STOP.
    pub view_index: usize,
}

impl ActionStep {
    pub fn new(kind: ActionKind) -> Self {
        let view_index = match kind {
            ActionKind::Forward => 1,
            ActionKind::TurnLeft => 2,
            ActionKind::TurnRight => 4,
            ActionKind::Stop => 0,
        };
        ActionStep { kind, view_index }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub poses: Vec<Pose>,
    pub actions: Vec<ActionStep>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Number of FORWARD moves (1 m each).
    pub fn path_length(&self) -> f64 {
        self.actions.iter().filter(|a| a.kind == ActionKind::Forward).count() as f64
    }
}

/// Kinematics of one action, independent of the scene.
pub fn apply_action(p: &Pose, kind: ActionKind) -> Pose {
    let (c, d) = (p.cell(), p.dir());
    match kind {
        ActionKind::Forward => {
            let (dx, dy) = DIRS[d];
            Pose::at_cell(((c.0 as i64 + dx) as usize, (c.1 as i64 + dy) as usize), d)
        }
        ActionKind::TurnLeft => Pose::at_cell(c, d + 1),
        ActionKind::TurnRight => Pose::at_cell(c, d + 3),
        ActionKind::Stop => *p,
    }
}

/// Poses produced by applying `actions` from `start`, one per action.
pub fn replay(start: &Pose, actions: &[ActionStep]) -> Vec<Pose> {
    let mut poses = Vec::with_capacity(actions.len());
    let mut p = *start;
    for a in actions {
        poses.push(p);
        p = apply_action(&p, a.kind);
    }
    poses
}

fn plan(scene: &Scene, rng: &mut ChaCha8Rng, start_dir: usize) -> Result<Vec<ActionKind>> {
    let to_goal = scene.bfs(scene.goal);
    let g = scene.grid_size;
    let dist = |c: Cell| to_goal[c.1 * g + c.0];
    let mut cell = scene.start;
    let mut dir = start_dir;
    let mut acts = Vec::new();
    let Some(mut d) = dist(cell) else {
        return Err(Error::Generation(format!("scene {}: goal unreachable", scene.id)));
    };
    while d > 0 {
        let opts: Vec<(usize, Cell)> = (0..4)
            .filter_map(|k| scene.step(cell, k).map(|n| (k, n)))
            .filter(|&(_, n)| dist(n) == Some(d - 1))
            .collect();
        // Prefer continuing straight, otherwise pick at random.
        let &(k, n) = opts
            .iter()
            .find(|(k, _)| *k == dir)
            .unwrap_or_else(|| &opts[rng.random_range(0..opts.len())]);
        match (k + 4 - dir) % 4 {
            0 => {}
            1 => acts.push(ActionKind::TurnLeft),
            3 => acts.push(ActionKind::TurnRight),
            _ => {
                let t = if rng.random_bool(0.5) { ActionKind::TurnLeft } else { ActionKind::TurnRight };
                acts.extend([t, t]);
            }
        }
        acts.push(ActionKind::Forward);
        dir = k;
        cell = n;
        d -= 1;
    }
    acts.push(ActionKind::Stop);
    Ok(acts)
}

/// Shortest-path trajectory from the scene's start to its goal.
pub fn sample_trajectory(scene: &Scene, seed: u64) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x7a1));
    let mut start_dir = rng.random_range(0..4usize);
    let mut acts = plan(scene, &mut rng, start_dir)?;
    if acts.len() > MAX_STEPS {
        // Face the first move instead of a random heading.
        let first = (0..4)
            .find(|&k| {
                scene.step(scene.start, k).is_some_and(|n| {
                    let to_goal = scene.bfs(scene.goal);
                    let g = scene.grid_size;
                    to_goal[n.1 * g + n.0].map(|d| d + 1) == to_goal[scene.start.1 * g + scene.start.0]
                })
            })
            .ok_or_else(|| Error::Generation("no first move".into()))?;
        start_dir = first;
        acts = plan(scene, &mut rng, start_dir)?;
    }
    if !(MIN_STEPS..=MAX_STEPS).contains(&acts.len()) {
        return Err(Error::Generation(format!(
            "scene {}: trajectory length {} outside {MIN_STEPS}..={MAX_STEPS}",
            scene.id,
            acts.len()
        )));
    }
    let actions: Vec<ActionStep> = acts.into_iter().map(ActionStep::new).collect();
    let poses = replay(&Pose::at_cell(scene.start, start_dir), &actions);
    Ok(Trajectory { poses, actions })
}
