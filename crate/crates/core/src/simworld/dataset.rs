//! Episode corpus: generation, split bookkeeping and on-disk format.
//!
//! A dataset directory holds `scenes.jsonl`, `episodes.jsonl` (one record
//! per line, feature tensors referenced by byte offset), `features.bin`
//! (little-endian f64 blob) and `manifest.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::features::{extract_view_features, feature_channels, orientation_code, ViewFeatureMap};
use super::grammar::{synthesize_instruction, Landmark};
use super::render::{render_observation, CameraRig};
use super::scene::{generate_scene, Scene, WorldParams};
use super::trajectory::{sample_trajectory, Trajectory};
use super::mix_seed;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Seen,
    Unseen,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Seen => "seen",
            Split::Unseen => "unseen",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "seen" => Ok(Split::Seen),
            "unseen" => Ok(Split::Unseen),
            _ => Err(Error::Config(format!("unknown split '{s}'"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EpisodeRecord {
    pub id: usize,
    pub scene_id: u64,
    pub split: Split,
    pub trajectory: Trajectory,
    pub instruction: Vec<String>,
    pub landmarks: Vec<Landmark>,
    /// `features[t][k]` for step `t` and view `k`.
    pub features: Vec<Vec<ViewFeatureMap>>,
    /// Orientation code of each view relative to the agent heading.
    pub orientations: Vec<[f64; 4]>,
}

impl EpisodeRecord {
    pub fn steps(&self) -> usize {
        self.trajectory.len()
    }

    pub fn action_views(&self) -> Vec<usize> {
        self.trajectory.actions.iter().map(|a| a.view_index).collect()
    }
}

/// Parameters of corpus generation.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSpec {
    pub world: WorldParams,
    pub rig: CameraRig,
    pub patch: usize,
    pub n_train: usize,
    pub n_seen: usize,
    pub n_unseen: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config_hash: String,
    pub n_train: usize,
    pub n_seen: usize,
    pub n_unseen: usize,
    pub n_scenes: usize,
    pub content_sha256: String,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub scenes: BTreeMap<u64, Scene>,
    pub episodes: Vec<EpisodeRecord>,
}

/// Renders and annotates one episode.
pub fn build_episode(
    id: usize,
    scene: &Scene,
    split: Split,
    spec: &DataSpec,
    traj_seed: u64,
) -> Result<EpisodeRecord> {
    let trajectory = sample_trajectory(scene, traj_seed)?;
    let (instruction, landmarks) = synthesize_instruction(scene, &trajectory);
    let mut features = Vec::with_capacity(trajectory.len());
    for (t, pose) in trajectory.poses.iter().enumerate() {
        let obs = render_observation(scene, pose, &spec.rig, t)?;
        features.push(
            obs.views
                .iter()
                .map(|v| extract_view_features(v, spec.patch, spec.world.n_categories, spec.world.n_colors))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let orientations = spec
        .rig
        .cameras()
        .iter()
        .map(|c| orientation_code(c.heading_offset, 0.0))
        .collect();
    Ok(EpisodeRecord {
        id,
        scene_id: scene.id,
        split,
        trajectory,
        instruction,
        landmarks,
        features,
        orientations,
    })
}

impl Dataset {
    /// Builds train / seen / unseen episodes. Train scenes carry one episode
    /// each; seen episodes reuse train scenes with new endpoints; unseen
    /// episodes come from fresh scenes.
    pub fn generate(spec: &DataSpec) -> Result<Dataset> {
        spec.world.validate()?;
        spec.rig.validate()?;
        if spec.n_train == 0 {
            return Err(Error::Config("n_train must be positive".into()));
        }
        let mut scenes = BTreeMap::new();
        let mut episodes = Vec::new();
        let scene_for = |idx: u64| -> Result<Scene> {
            let mut s = generate_scene(mix_seed(spec.seed, 1_000_000 + idx), &spec.world)?;
            s.id = idx;
            Ok(s)
        };
        for i in 0..spec.n_train as u64 {
            let s = scene_for(i)?;
            let id = episodes.len();
            episodes.push(build_episode(id, &s, Split::Train, spec, mix_seed(spec.seed, 2_000_000 + id as u64))?);
            scenes.insert(i, s);
        }
        for j in 0..spec.n_seen as u64 {
            let base = &scenes[&(j % spec.n_train as u64)];
            let s = base.with_endpoints(mix_seed(spec.seed, 3_000_000 + j))?;
            let id = episodes.len();
            episodes.push(build_episode(id, &s, Split::Seen, spec, mix_seed(spec.seed, 2_000_000 + id as u64))?);
        }
        for j in 0..spec.n_unseen as u64 {
            let idx = spec.n_train as u64 + j;
            let s = scene_for(idx)?;
            let id = episodes.len();
            episodes.push(build_episode(id, &s, Split::Unseen, spec, mix_seed(spec.seed, 2_000_000 + id as u64))?);
            scenes.insert(idx, s);
        }
        Ok(Dataset { scenes, episodes })
    }

    pub fn split(&self, split: Split) -> Vec<&EpisodeRecord> {
        self.episodes.iter().filter(|e| e.split == split).collect()
    }

    pub fn scene_ids(&self, split: Split) -> BTreeSet<u64> {
        self.split(split).iter().map(|e| e.scene_id).collect()
    }

    /// Scene with the endpoints of the given episode.
    pub fn episode_scene(&self, ep: &EpisodeRecord) -> Result<Scene> {
        let base = self
            .scenes
            .get(&ep.scene_id)
            .ok_or_else(|| Error::Invalid(format!("episode {} references unknown scene {}", ep.id, ep.scene_id)))?;
        let start = ep.trajectory.poses.first().map(|p| p.cell()).unwrap_or(base.start);
        let goal = ep.trajectory.poses.last().map(|p| p.cell()).unwrap_or(base.goal);
        Ok(Scene {
            start,
            goal,
            ..base.clone()
        })
    }

    pub fn save(&self, dir: &Path, seed: u64, config_hash: &str) -> Result<Manifest> {
        std::fs::create_dir_all(dir)?;
        let mut hasher = Sha256::new();
        {
            let mut w = BufWriter::new(File::create(dir.join("scenes.jsonl"))?);
            for s in self.scenes.values() {
                let line = serde_json::to_string(s)?;
                hasher.update(line.as_bytes());
                writeln!(w, "{line}")?;
            }
            w.flush()?;
        }
        let mut blob: Vec<u8> = Vec::new();
        {
            let mut w = BufWriter::new(File::create(dir.join("episodes.jsonl"))?);
            for e in &self.episodes {
                let offset = blob.len() as u64;
                let first = &e.features[0][0];
                for step in &e.features {
                    for v in step {
                        for x in v.data.data().iter().chain(&v.depth_target) {
                            blob.extend_from_slice(&x.to_le_bytes());
                        }
                    }
                }
                let line = serde_json::to_string(&EpisodeLine {
                    id: e.id,
                    scene: e.scene_id,
                    split: e.split,
                    trajectory: e.trajectory.clone(),
                    action_views: e.action_views(),
                    instruction: e.instruction.join(" "),
                    landmarks: e.landmarks.iter().map(Landmark::phrase).collect(),
                    orientations: e.orientations.clone(),
                    features: FeatureRef {
                        offset,
                        steps: e.features.len(),
                        views: e.features[0].len(),
                        channels: first.channels(),
                        height: first.height(),
                        width: first.width(),
                    },
                })?;
                hasher.update(line.as_bytes());
                writeln!(w, "{line}")?;
            }
            w.flush()?;
        }
        hasher.update(&blob);
        std::fs::write(dir.join("features.bin"), &blob)?;
        let count = |s| self.episodes.iter().filter(|e| e.split == s).count();
        let manifest = Manifest {
            seed,
            config_hash: config_hash.to_string(),
            n_train: count(Split::Train),
            n_seen: count(Split::Seen),
            n_unseen: count(Split::Unseen),
            n_scenes: self.scenes.len(),
            content_sha256: hex::encode(hasher.finalize()),
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<(Dataset, Manifest)> {
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut scenes = BTreeMap::new();
        for line in BufReader::new(File::open(dir.join("scenes.jsonl"))?).lines() {
            let s: Scene = serde_json::from_str(&line?)?;
            scenes.insert(s.id, s);
        }
        let blob = std::fs::read(dir.join("features.bin"))?;
        let mut episodes = Vec::new();
        for line in BufReader::new(File::open(dir.join("episodes.jsonl"))?).lines() {
            let l: EpisodeLine = serde_json::from_str(&line?)?;
            let f = &l.features;
            let per_view = f.channels * f.height * f.width + f.height * f.width;
            let need = f.offset as usize + f.steps * f.views * per_view * 8;
            if need > blob.len() {
                return Err(Error::Format(format!("episode {} features past end of blob", l.id)));
            }
            let mut pos = f.offset as usize;
            let mut read = |n: usize| -> Vec<f64> {
                let v = blob[pos..pos + 8 * n]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                pos += 8 * n;
                v
            };
            let mut features = Vec::with_capacity(f.steps);
            for _ in 0..f.steps {
                let mut step = Vec::with_capacity(f.views);
                for _ in 0..f.views {
                    let data = Tensor::new(vec![f.channels, f.height, f.width], read(f.channels * f.height * f.width))?;
                    let depth_target = read(f.height * f.width);
                    step.push(ViewFeatureMap { data, depth_target });
                }
                features.push(step);
            }
            let landmarks = l
                .landmarks
                .iter()
                .map(|p| Landmark::parse_phrase(p).ok_or_else(|| Error::Format(format!("bad landmark '{p}'"))))
                .collect::<Result<Vec<_>>>()?;
            episodes.push(EpisodeRecord {
                id: l.id,
                scene_id: l.scene,
                split: l.split,
                trajectory: l.trajectory,
                instruction: l.instruction.split_whitespace().map(String::from).collect(),
                landmarks,
                features,
                orientations: l.orientations,
            });
        }
        Ok((Dataset { scenes, episodes }, manifest))
    }

    /// Feature channel count implied by world parameters.
    pub fn channels(world: &WorldParams) -> usize {
        feature_channels(world.n_categories, world.n_colors)
    }
}

#[derive(Serialize, Deserialize)]
struct FeatureRef {
    offset: u64,
    steps: usize,
    views: usize,
    channels: usize,
    height: usize,
    width: usize,
}

#[derive(Serialize, Deserialize)]
struct EpisodeLine {
    id: usize,
    scene: u64,
    split: Split,
    trajectory: Trajectory,
    action_views: Vec<usize>,
    instruction: String,
    landmarks: Vec<String>,
    orientations: Vec<[f64; 4]>,
    features: FeatureRef,
}
