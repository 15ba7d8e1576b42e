//! Procedural 2.5D houses on a unit grid, trajectories, multi-view
//! rendering, handcrafted view features, the instruction grammar and a
//! scripted follower.

pub mod dataset;
pub mod features;
pub mod follower;
pub mod grammar;
pub mod render;
pub mod scene;
pub mod trajectory;

pub use dataset::{Dataset, EpisodeRecord, Split};
pub use features::{extract_view_features, orientation_code, ViewFeatureMap};
pub use follower::{follow_instruction, FollowResult};
pub use grammar::{parse_instruction, synthesize_instruction, Clause, Landmark};
pub use render::{render_observation, CameraModel, CameraRig, Observation, RenderedView};
pub use scene::{generate_scene, Scene, SceneObject, Segment, WorldParams};
pub use trajectory::{sample_trajectory, ActionKind, ActionStep, Pose, Trajectory};

/// Object category names, indexed by 0-based category.
pub const CATEGORY_NAMES: [&str; 8] = ["door", "table", "sofa", "chair", "bed", "plant", "cabinet", "lamp"];

/// Color names, indexed by 0-based color.
pub const COLOR_NAMES: [&str; 4] = ["red", "blue", "green", "yellow"];

/// Nominal (width, length, height) per category in meters.
pub(crate) const CATEGORY_SIZES: [(f64, f64, f64); 8] = [
    (0.8, 0.3, 2.0),
    (0.9, 0.7, 0.75),
    (0.9, 0.6, 0.8),
    (0.5, 0.5, 0.9),
    (0.9, 0.9, 0.6),
    (0.4, 0.4, 1.2),
    (0.6, 0.5, 1.6),
    (0.3, 0.3, 1.5),
];

/// Grid cell as (column, row); cell `(i, j)` spans `[i, i+1] × [j, j+1]`
/// in meters.
pub type Cell = (usize, usize);

/// Integer heading steps of 90 degrees, counter-clockwise from +x.
pub(crate) const DIRS: [(i64, i64); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];

/// Deterministic 64-bit mixing used to derive child seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
