//! Grid houses with unit-length walls on cell edges and box-shaped objects
//! at cell centers.

use std::collections::{BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mix_seed, Cell, CATEGORY_NAMES, CATEGORY_SIZES, COLOR_NAMES, DIRS};
use crate::error::{Error, Result};

/// Radius around the agent inside which objects count as salient.
pub const SALIENT_RADIUS: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldParams {
    pub grid_size: usize,
    pub n_objects: usize,
    pub n_interior_walls: usize,
    pub n_categories: usize,
    pub n_colors: usize,
    pub wall_height: f64,
    pub max_retries: usize,
}

impl Default for WorldParams {
    fn default() -> Self {
        WorldParams {
            grid_size: 8,
            n_objects: 6,
            n_interior_walls: 2,
            n_categories: 8,
            n_colors: 4,
            wall_height: 2.5,
            max_retries: 200,
        }
    }
}

impl WorldParams {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 6 {
            return Err(Error::Config(format!("grid_size {} < 6", self.grid_size)));
        }
        if self.n_objects == 0 {
            return Err(Error::Config("scene needs at least one object".into()));
        }
        if self.n_categories == 0 || self.n_categories > CATEGORY_NAMES.len() {
            return Err(Error::Config(format!("n_categories must be in 1..={}", CATEGORY_NAMES.len())));
        }
        if self.n_colors == 0 || self.n_colors > COLOR_NAMES.len() {
            return Err(Error::Config(format!("n_colors must be in 1..={}", COLOR_NAMES.len())));
        }
        if self.n_objects > self.n_categories * self.n_colors || self.n_objects * 2 > self.grid_size * self.grid_size {
            return Err(Error::Config(format!("too many objects ({})", self.n_objects)));
        }
        if !(self.wall_height > 0.0) {
            return Err(Error::Config("wall_height must be positive".into()));
        }
        Ok(())
    }
}

/// Axis-aligned wall segment in the floor plane, extruded from the floor
/// to the wall height.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Segment {
    fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Segment {
            x0: x0.min(x1),
            y0: y0.min(y1),
            x1: x0.max(x1),
            y1: y0.max(y1),
        }
    }

    /// Whether the closed 2D segment `p → q` touches this wall.
    pub fn crosses(&self, p: (f64, f64), q: (f64, f64)) -> bool {
        let d = (q.0 - p.0, q.1 - p.1);
        let e = (self.x1 - self.x0, self.y1 - self.y0);
        let den = d.0 * e.1 - d.1 * e.0;
        let w = (self.x0 - p.0, self.y0 - p.1);
        if den.abs() < 1e-12 {
            // Parallel: overlap only if collinear and intervals meet.
            if (w.0 * d.1 - w.1 * d.0).abs() > 1e-12 {
                return false;
            }
            let along = |x: f64, y: f64| {
                if d.0.abs() > d.1.abs() {
                    (x - p.0) / d.0
                } else if d.1 != 0.0 {
                    (y - p.1) / d.1
                } else {
                    0.0
                }
            };
            let (a, b) = (along(self.x0, self.y0), along(self.x1, self.y1));
            return a.min(b) <= 1.0 && a.max(b) >= 0.0;
        }
        let t = (w.0 * e.1 - w.1 * e.0) / den;
        let u = (w.0 * d.1 - w.1 * d.0) / den;
        (-1e-12..=1.0 + 1e-12).contains(&t) && (-1e-12..=1.0 + 1e-12).contains(&u)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    /// 0-based category; maps render with `category + 1`.
    pub category: usize,
    /// 0-based color; maps render with `color + 1`.
    pub color: usize,
    /// Box center (x, y, z).
    pub center: [f64; 3],
    /// Box size (w along x, l along y, h).
    pub size: [f64; 3],
}

impl SceneObject {
    pub fn cell(&self) -> Cell {
        (self.center[0].floor() as usize, self.center[1].floor() as usize)
    }

    pub fn min(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| self.center[i] - self.size[i] / 2.0)
    }

    pub fn max(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| self.center[i] + self.size[i] / 2.0)
    }

    pub fn phrase(&self) -> String {
        format!("{} {}", COLOR_NAMES[self.color], CATEGORY_NAMES[self.category])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub grid_size: usize,
    /// (min_x, min_y, max_x, max_y) in meters.
    pub bounds: [f64; 4],
    pub wall_height: f64,
    pub walls: Vec<Segment>,
    pub objects: Vec<SceneObject>,
    pub start: Cell,
    pub goal: Cell,
}

pub fn cell_center(c: Cell) -> (f64, f64) {
    (c.0 as f64 + 0.5, c.1 as f64 + 0.5)
}

impl Scene {
    pub fn in_grid(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.grid_size && (y as usize) < self.grid_size
    }

    pub fn object_at(&self, c: Cell) -> Option<usize> {
        self.objects.iter().position(|o| o.cell() == c)
    }

    /// Whether a wall lies on the shared edge of two 4-adjacent cells.
    pub fn wall_between(&self, a: Cell, b: Cell) -> bool {
        let seg = edge_segment(a, b);
        self.walls.iter().any(|w| *w == seg)
    }

    /// Neighbor of `c` in direction `dir` if the move is inside the grid,
    /// not through a wall and not into an object.
    pub fn step(&self, c: Cell, dir: usize) -> Option<Cell> {
        let (dx, dy) = DIRS[dir % 4];
        let (nx, ny) = (c.0 as i64 + dx, c.1 as i64 + dy);
        if !self.in_grid(nx, ny) {
            return None;
        }
        let n = (nx as usize, ny as usize);
        if self.wall_between(c, n) || self.object_at(n).is_some() {
            return None;
        }
        Some(n)
    }

    pub fn is_free(&self, c: Cell) -> bool {
        c.0 < self.grid_size && c.1 < self.grid_size && self.object_at(c).is_none()
    }

    /// Breadth-first distances (in moves) from `from`; `None` = unreachable.
    pub fn bfs(&self, from: Cell) -> Vec<Option<usize>> {
        let g = self.grid_size;
        let mut dist = vec![None; g * g];
        if !self.is_free(from) {
            return dist;
        }
        dist[from.1 * g + from.0] = Some(0);
        let mut q = VecDeque::from([from]);
        while let Some(c) = q.pop_front() {
            let d = dist[c.1 * g + c.0].expect("visited");
            for dir in 0..4 {
                if let Some(n) = self.step(c, dir) {
                    if dist[n.1 * g + n.0].is_none() {
                        dist[n.1 * g + n.0] = Some(d + 1);
                        q.push_back(n);
                    }
                }
            }
        }
        dist
    }

    pub fn distance(&self, a: Cell, b: Cell) -> Option<usize> {
        self.bfs(a)[b.1 * self.grid_size + b.0]
    }

    pub fn line_of_sight(&self, p: (f64, f64), q: (f64, f64)) -> bool {
        !self.walls.iter().any(|w| w.crosses(p, q))
    }

    /// Objects within the salient radius of `pos` and in line of sight,
    /// nearest first (ties by index).
    pub fn salient_objects(&self, pos: (f64, f64)) -> Vec<usize> {
        let mut v: Vec<(f64, usize)> = self
            .objects
            .iter()
            .enumerate()
            .filter_map(|(i, o)| {
                let c = (o.center[0], o.center[1]);
                let d = ((c.0 - pos.0).powi(2) + (c.1 - pos.1).powi(2)).sqrt();
                (d <= SALIENT_RADIUS + 1e-9 && self.line_of_sight(pos, c)).then_some((d, i))
            })
            .collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        v.into_iter().map(|(_, i)| i).collect()
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        let g = self.grid_size;
        (0..g)
            .flat_map(|y| (0..g).map(move |x| (x, y)))
            .filter(|&c| self.is_free(c))
            .collect()
    }

    /// Whether every free cell reaches every other.
    pub fn connected(&self) -> bool {
        let free = self.free_cells();
        let Some(&first) = free.first() else { return false };
        let dist = self.bfs(first);
        free.iter().all(|c| dist[c.1 * self.grid_size + c.0].is_some())
    }

    /// Copy of this scene with freshly sampled start and goal cells.
    pub fn with_endpoints(&self, seed: u64) -> Result<Scene> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xe9d));
        let (start, goal) = choose_endpoints(self, &mut rng)
            .ok_or_else(|| Error::Generation(format!("scene {}: no valid endpoints", self.id)))?;
        Ok(Scene {
            start,
            goal,
            ..self.clone()
        })
    }
}

fn edge_segment(a: Cell, b: Cell) -> Segment {
    let (x0, y0, x1, y1) = (a.0 as f64, a.1 as f64, b.0 as f64, b.1 as f64);
    if a.1 == b.1 {
        let x = x0.max(x1);
        Segment::new(x, y0, x, y0 + 1.0)
    } else {
        let y = y0.max(y1);
        Segment::new(x0, y, x0 + 1.0, y)
    }
}

/// Start and goal with 2..=5 moves between them, preferring goals that have
/// a salient object nearby.
fn choose_endpoints(scene: &Scene, rng: &mut ChaCha8Rng) -> Option<(Cell, Cell)> {
    let free = scene.free_cells();
    for _ in 0..64 {
        let start = free[rng.random_range(0..free.len())];
        let dist = scene.bfs(start);
        let cands: Vec<Cell> = free
            .iter()
            .copied()
            .filter(|c| matches!(dist[c.1 * scene.grid_size + c.0], Some(d) if (2..=5).contains(&d)))
            .collect();
        if cands.is_empty() {
            continue;
        }
        let near: Vec<Cell> = cands
            .iter()
            .copied()
            .filter(|&c| !scene.salient_objects(cell_center(c)).is_empty())
            .collect();
        let pool = if !near.is_empty() && rng.random_bool(0.85) { &near } else { &cands };
        return Some((start, pool[rng.random_range(0..pool.len())]));
    }
    None
}

/// Builds a scene deterministically from `seed`.
pub fn generate_scene(seed: u64, params: &WorldParams) -> Result<Scene> {
    params.validate()?;
    let g = params.grid_size;
    for attempt in 0..params.max_retries as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, attempt));
        let mut walls: BTreeSet<(i64, i64, i64, i64)> = BTreeSet::new();
        for i in 0..g as i64 {
            walls.insert((i, 0, i + 1, 0));
            walls.insert((i, g as i64, i + 1, g as i64));
            walls.insert((0, i, 0, i + 1));
            walls.insert((g as i64, i, g as i64, i + 1));
        }
        for _ in 0..params.n_interior_walls {
            let vertical = rng.random_bool(0.5);
            let line = rng.random_range(2..=g as i64 - 2);
            let len = rng.random_range(3..=g as i64);
            let from = rng.random_range(0..=g as i64 - len);
            let door = rng.random_range(from..from + len);
            for s in from..from + len {
                if s == door {
                    continue;
                }
                walls.insert(if vertical { (line, s, line, s + 1) } else { (s, line, s + 1, line) });
            }
        }
        let walls: Vec<Segment> = walls
            .into_iter()
            .map(|(a, b, c, d)| Segment::new(a as f64, b as f64, c as f64, d as f64))
            .collect();

        let mut cells: Vec<Cell> = (0..g).flat_map(|y| (0..g).map(move |x| (x, y))).collect();
        cells.shuffle(&mut rng);
        let mut combos: Vec<(usize, usize)> = (0..params.n_categories)
            .flat_map(|c| (0..params.n_colors).map(move |k| (c, k)))
            .collect();
        combos.shuffle(&mut rng);
        let objects: Vec<SceneObject> = cells[..params.n_objects]
            .iter()
            .zip(&combos)
            .map(|(&cell, &(category, color))| {
                let (w, l, h) = CATEGORY_SIZES[category];
                let size = [w, l, h].map(|s| s * rng.random_range(0.9..1.1));
                let (cx, cy) = cell_center(cell);
                SceneObject {
                    category,
                    color,
                    center: [cx, cy, size[2] / 2.0],
                    size,
                }
            })
            .collect();
        let mut scene = Scene {
            id: seed,
            grid_size: g,
            bounds: [0.0, 0.0, g as f64, g as f64],
            wall_height: params.wall_height,
            walls,
            objects,
            start: (0, 0),
            goal: (0, 0),
        };
        if !scene.connected() {
            continue;
        }
        if let Some((s, t)) = choose_endpoints(&scene, &mut rng) {
            scene.start = s;
            scene.goal = t;
            return Ok(scene);
        }
    }
    Err(Error::Generation(format!(
        "no connected scene for seed {seed} after {} attempts",
        params.max_retries
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_export() {
        let p = WorldParams::default();
        let a = serde_json::to_vec(&generate_scene(0, &p).unwrap()).unwrap();
        let b = serde_json::to_vec(&generate_scene(0, &p).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_objects_rejected() {
        let p = WorldParams {
            n_objects: 0,
            ..WorldParams::default()
        };
        assert!(matches!(generate_scene(0, &p), Err(Error::Config(_))));
    }

    #[test]
    fn crossing_segments() {
        let w = Segment::new(1.0, 0.0, 1.0, 2.0);
        assert!(w.crosses((0.5, 0.5), (1.5, 0.5)));
        assert!(!w.crosses((0.5, 0.5), (0.9, 1.5)));
        assert!(!w.crosses((0.5, 2.5), (1.5, 2.5)));
    }
}
