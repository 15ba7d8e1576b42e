//! The pipeline commands as library functions: dataset generation, BEV
//! pretraining, prompt tuning, generation and evaluation.

use std::collections::BTreeSet;
use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::bev::train::{evaluate, pretrain_epochs};
use crate::bev::{BevFrame, BevModel, MapReport};
use crate::error::{Error, Result};
use crate::fusion::VisualMode;
use crate::metrics::{evaluate_all, CorpusItem, MetricReport};
use crate::numerics::{par_map, Checkpoint, ParameterStore, Tag, Tensor};
use crate::refine::{train, warm_up, warm_up_corpus, EpisodeExample, Instructor, Task, Turn};
use crate::simworld::dataset::Manifest;
use crate::simworld::follower::spl;
use crate::simworld::{follow_instruction, mix_seed, Dataset, EpisodeRecord, Split};

const BEV_INIT_SALT: u64 = 0xb0e1;
const INSTRUCTOR_INIT_SALT: u64 = 0x1a57;

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let ds = Dataset::generate(&cfg.data_spec())?;
    ds.save(out, cfg.seed, &cfg.hash())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    Ok(Dataset::load(dir)?.0)
}

/// BEV model with freshly initialized parameters added to `store`.
pub fn build_bev(cfg: &RunConfig, store: &mut ParameterStore) -> Result<BevModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, BEV_INIT_SALT));
    BevModel::new(store, &mut rng, &cfg.bev(), cfg.feat_dim(), cfg.world().n_categories, Tag::Tuned)
}

/// Detection frames of every step of the given episodes.
pub fn bev_frames(cfg: &RunConfig, model: &BevModel, ds: &Dataset, eps: &[&EpisodeRecord]) -> Result<Vec<BevFrame>> {
    let cams = cfg.rig().cameras();
    let per_episode = par_map(eps, |ep| -> Result<Vec<BevFrame>> {
        let scene = ds.episode_scene(ep)?;
        ep.trajectory
            .poses
            .iter()
            .zip(&ep.features)
            .map(|(pose, views)| BevFrame::new(model, &scene, pose, views, &cams, cfg.patch))
            .collect()
    });
    let mut out = Vec::new();
    for frames in per_episode {
        out.extend(frames?);
    }
    Ok(out)
}

/// Detection pretraining summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevReport {
    pub config_hash: String,
    pub epochs: usize,
    pub epoch_losses: Vec<f64>,
    pub held_in_frames: usize,
    pub unseen_frames: usize,
    pub held_in_map: f64,
    pub unseen_map: f64,
    pub held_in_per_class: Vec<Option<f64>>,
    pub unseen_per_class: Vec<Option<f64>>,
}

/// Frames of the first `bev_scenes` train scenes and of the unseen split.
pub fn detection_frames(cfg: &RunConfig, model: &BevModel, ds: &Dataset) -> Result<(Vec<BevFrame>, Vec<BevFrame>)> {
    let train: Vec<&EpisodeRecord> = ds.split(Split::Train).into_iter().take(cfg.bev_scenes).collect();
    let unseen = ds.split(Split::Unseen);
    Ok((bev_frames(cfg, model, ds, &train)?, bev_frames(cfg, model, ds, &unseen)?))
}

/// Trains the BEV stack over `epochs` of the configured schedule, then
/// scores held-in and unseen frames. A run can be split at any epoch and
/// resumed from its checkpoint store.
pub fn train_bev(
    cfg: &RunConfig,
    model: &BevModel,
    store: &mut ParameterStore,
    frames: &(Vec<BevFrame>, Vec<BevFrame>),
    epochs: Range<usize>,
) -> Result<BevReport> {
    let (held_in, unseen) = frames;
    let losses = pretrain_epochs(model, store, held_in, &cfg.pretrain(), epochs, |e, l| {
        log::info!("bev epoch {e}: loss {l:.4}");
    })?;
    let a = evaluate(model, store, held_in)?;
    let b: MapReport = evaluate(model, store, unseen)?;
    Ok(BevReport {
        config_hash: cfg.hash(),
        epochs: cfg.bev_epochs,
        epoch_losses: losses,
        held_in_frames: held_in.len(),
        unseen_frames: unseen.len(),
        held_in_map: a.map,
        unseen_map: b.map,
        held_in_per_class: a.per_class,
        unseen_per_class: b.per_class,
    })
}

/// Full pretraining run; the returned store is frozen.
pub fn pretrain_bev(cfg: &RunConfig, ds: &Dataset) -> Result<(BevModel, ParameterStore, BevReport)> {
    let mut store = ParameterStore::new();
    let model = build_bev(cfg, &mut store)?;
    let frames = detection_frames(cfg, &model, ds)?;
    let report = train_bev(cfg, &model, &mut store, &frames, 0..cfg.bev_epochs)?;
    store.set_tag_prefix("bev.", Tag::Frozen);
    Ok((model, store, report))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Sibling path with an extra suffix, e.g. `bev.ckpt` → `bev.ckpt.report.json`.
pub fn sidecar(path: &Path, suffix: &str) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}

pub fn cmd_pretrain_bev(cfg: &RunConfig, data: &Path, out: &Path) -> Result<BevReport> {
    let ds = load_dataset(data)?;
    let (_, store, report) = pretrain_bev(cfg, &ds)?;
    Checkpoint::new(&cfg.hash(), store).save(out)?;
    write_json(&sidecar(out, ".report.json"), &report)?;
    Ok(report)
}

/// BEV model whose values come from a checkpoint.
pub fn load_bev(cfg: &RunConfig, ckpt: &Path) -> Result<(BevModel, ParameterStore)> {
    let ck = Checkpoint::load(ckpt)?;
    let mut store = ParameterStore::new();
    let model = build_bev(cfg, &mut store)?;
    let n = store.load_values_from(&ck.store)?;
    if n != store.len() {
        return Err(Error::Invalid(format!("BEV checkpoint holds {n} of {} parameters", store.len())));
    }
    store.set_tag_prefix("bev.", Tag::Frozen);
    Ok((model, store))
}

/// Frozen BEV features of every step, `[T·Q, D_b]`.
pub fn bev_features(cfg: &RunConfig, model: &BevModel, store: &ParameterStore, ep: &EpisodeRecord) -> Result<Tensor> {
    let cams = cfg.rig().cameras();
    let mut rows = Vec::new();
    for (pose, views) in ep.trajectory.poses.iter().zip(&ep.features) {
        let input = model.frame_input(views, &cams, pose, cfg.patch)?;
        rows.extend_from_slice(model.encode_value(store, &input)?.data());
    }
    let d = model.cfg.dim;
    Tensor::new(vec![rows.len() / d, d], rows)
}

/// Training or evaluation examples of a split, with BEV features when a
/// BEV model is given.
pub fn examples(
    cfg: &RunConfig,
    ds: &Dataset,
    split: Split,
    bev: Option<(&BevModel, &ParameterStore)>,
) -> Result<Vec<EpisodeExample>> {
    let vocab = crate::lm::Vocabulary::new();
    par_map(&ds.split(split), |ep| {
        let feats = match bev {
            Some((m, s)) => Some(bev_features(cfg, m, s, ep)?),
            None => None,
        };
        EpisodeExample::new(ep, &vocab, feats)
    })
    .into_iter()
    .collect()
}

/// Instructor parameters added to `store` (which may already hold BEV
/// parameters), with prompt-tuning tags applied.
pub fn build_instructor(cfg: &RunConfig, mode: VisualMode, store: &mut ParameterStore, seed: u64) -> Result<Instructor> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, INSTRUCTOR_INIT_SALT));
    let model = Instructor::new(store, &mut rng, &cfg.instructor(mode))?;
    model.prompt_tuning_tags(store);
    Ok(model)
}

/// SHA-256 over names and value bits of every FROZEN parameter.
pub fn frozen_hash(store: &ParameterStore) -> String {
    let mut h = Sha256::new();
    for (_, p) in store.iter() {
        if p.tag() == Tag::Frozen {
            h.update(p.name().as_bytes());
            for v in p.value().data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

/// Copies of the parameters whose names start with `prefix`.
pub fn subset(store: &ParameterStore, prefix: &str) -> Result<ParameterStore> {
    let mut out = ParameterStore::new();
    for (_, p) in store.iter() {
        if p.name().starts_with(prefix) {
            out.add(p.name(), p.value().clone(), Tag::Frozen)?;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    /// Last iteration of the window (1-based).
    pub step: usize,
    pub loss: f64,
    pub landmark_loss: Option<f64>,
    pub instruction_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config_hash: String,
    pub mode: String,
    pub iterations: usize,
    pub tuned_fraction: f64,
    pub tuned_scalars: usize,
    pub total_scalars: usize,
    pub warm_up_losses: Vec<f64>,
    pub frozen_hash_start: String,
    pub frozen_hash_end: String,
    pub entries: Vec<LogEntry>,
}

/// Window means of the per-iteration losses.
pub fn log_entries(losses: &[(Task, f64)], every: usize) -> Vec<LogEntry> {
    let every = every.max(1);
    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    losses
        .chunks(every)
        .enumerate()
        .map(|(i, w)| {
            let of = |t: Task| w.iter().filter(|(k, _)| *k == t).map(|(_, l)| *l).collect::<Vec<_>>();
            LogEntry {
                step: i * every + w.len(),
                loss: w.iter().map(|(_, l)| l).sum::<f64>() / w.len() as f64,
                landmark_loss: mean(of(Task::Landmarks)),
                instruction_loss: mean(of(Task::Instructions)),
            }
        })
        .collect()
}

/// One complete prompt-tuning run on a store that already holds a frozen
/// BEV model: warm-up of the base decoder, freezing, then joint training.
pub struct TrainedModel {
    pub model: Instructor,
    pub store: ParameterStore,
    pub log: TrainLog,
}

pub fn train_instructor(
    cfg: &RunConfig,
    mut store: ParameterStore,
    data: &[EpisodeExample],
    mode: VisualMode,
    refinement: bool,
    iterations: usize,
    seed: u64,
) -> Result<TrainedModel> {
    let model = build_instructor(cfg, mode, &mut store, seed)?;
    let corpus = warm_up_corpus(&model, data);
    let warm = warm_up(&model, &mut store, &corpus, &cfg.warm_up())?;
    log::info!("warm-up losses {warm:?}");
    finish_training(cfg, model, store, data, refinement, iterations, seed, warm)
}

/// Joint training after the base decoder is in place and frozen.
#[allow(clippy::too_many_arguments)]
pub fn finish_training(
    cfg: &RunConfig,
    model: Instructor,
    mut store: ParameterStore,
    data: &[EpisodeExample],
    refinement: bool,
    iterations: usize,
    seed: u64,
    warm_up_losses: Vec<f64>,
) -> Result<TrainedModel> {
    model.prompt_tuning_tags(&mut store);
    let start = frozen_hash(&store);
    let tc = cfg.train(iterations, refinement, seed);
    let mut history = Vec::with_capacity(iterations);
    train(&model, &mut store, data, &tc, |it, task, l| {
        history.push((task, l));
        if (it + 1) % cfg.log_every.max(1) == 0 {
            log::info!("step {}: {task:?} loss {l:.4}", it + 1);
        }
    })?;
    let log = TrainLog {
        config_hash: cfg.hash(),
        mode: model.cfg.mode.name().to_string(),
        iterations,
        tuned_fraction: store.tuned_fraction(),
        tuned_scalars: store.scalar_count(Some(Tag::Tuned)),
        total_scalars: store.scalar_count(None),
        warm_up_losses,
        frozen_hash_start: start,
        frozen_hash_end: frozen_hash(&store),
        entries: log_entries(&history, cfg.log_every),
    };
    Ok(TrainedModel { model, store, log })
}

pub fn cmd_train(cfg: &RunConfig, data: &Path, bev_ckpt: &Path, out: &Path) -> Result<TrainLog> {
    let ds = load_dataset(data)?;
    let (bev, store) = load_bev(cfg, bev_ckpt)?;
    let bev_in = cfg.mode.uses_bev().then_some((&bev, &store));
    let exs = examples(cfg, &ds, Split::Train, bev_in)?;
    let trained = train_instructor(cfg, store.clone(), &exs, cfg.mode, cfg.refinement, cfg.iterations, cfg.seed)?;
    Checkpoint::new(&cfg.hash(), trained.store).save(out)?;
    write_json(&sidecar(out, ".log.json"), &trained.log)?;
    Ok(trained.log)
}

/// BEV and instructor rebuilt from the configuration with checkpoint values.
pub fn load_trained(cfg: &RunConfig, ckpt: &Path) -> Result<(BevModel, Instructor, ParameterStore)> {
    let ck = Checkpoint::load(ckpt)?;
    if ck.config_hash != cfg.hash() {
        return Err(Error::Config(format!(
            "checkpoint was trained with config {} but the current config hashes to {}",
            ck.config_hash,
            cfg.hash()
        )));
    }
    let mut store = ParameterStore::new();
    let bev = build_bev(cfg, &mut store)?;
    let model = build_instructor(cfg, cfg.mode, &mut store, cfg.seed)?;
    let n = store.load_values_from(&ck.store)?;
    if n != store.len() {
        return Err(Error::Invalid(format!("checkpoint holds {n} of {} parameters", store.len())));
    }
    Ok((bev, model, store))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedEpisode {
    pub id: usize,
    pub turns: Vec<Turn>,
    pub instruction: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationFile {
    pub config_hash: String,
    pub split: Split,
    pub steps: usize,
    pub episodes: Vec<GeneratedEpisode>,
}

impl GenerationFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Refinement traces for every example, greedy decoding.
pub fn generate_all(model: &Instructor, store: &ParameterStore, exs: &[EpisodeExample], steps: usize) -> Result<Vec<GeneratedEpisode>> {
    par_map(exs, |ex| {
        let prompts = model.prompt_tensor(store, &ex.visual)?;
        let turns = model.iterative_refine(store, &prompts, steps)?;
        let instruction = turns.last().map(|t| t.instruction.clone()).unwrap_or_default();
        Ok(GeneratedEpisode {
            id: ex.id,
            turns,
            instruction,
        })
    })
    .into_iter()
    .collect()
}

pub fn cmd_generate(cfg: &RunConfig, ckpt: &Path, data: &Path, split: Split, steps: usize, out: &Path) -> Result<GenerationFile> {
    let ds = load_dataset(data)?;
    let (bev, model, store) = load_trained(cfg, ckpt)?;
    let bev_in = cfg.mode.uses_bev().then_some((&bev, &store));
    let exs = examples(cfg, &ds, split, bev_in)?;
    let file = GenerationFile {
        config_hash: cfg.hash(),
        split,
        steps,
        episodes: generate_all(&model, &store, &exs, steps)?,
    };
    file.save(out)?;
    Ok(file)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: MetricReport,
    pub success_rate: f64,
    pub spl: f64,
}

impl EvalReport {
    pub fn to_record(&self) -> String {
        format!("{}sr {:.4}\nspl {:.4}\n", self.metrics.to_record(), self.success_rate, self.spl)
    }
}

/// Text metrics against the reference instructions plus the scripted
/// follower's success and SPL on the generated instructions.
pub fn evaluate_generation(ds: &Dataset, split: Split, generated: &[GeneratedEpisode]) -> Result<EvalReport> {
    let eps = ds.split(split);
    let want: BTreeSet<usize> = eps.iter().map(|e| e.id).collect();
    let have: BTreeSet<usize> = generated.iter().map(|g| g.id).collect();
    if want != have {
        let missing: Vec<usize> = want.difference(&have).copied().collect();
        let extra: Vec<usize> = have.difference(&want).copied().collect();
        return Err(Error::Invalid(format!(
            "generation ids do not match the {split} split: missing {missing:?}, unexpected {extra:?}"
        )));
    }
    let by_id: std::collections::BTreeMap<usize, &GeneratedEpisode> = generated.iter().map(|g| (g.id, g)).collect();
    let mut items = Vec::with_capacity(eps.len());
    let mut sr = 0.0;
    let mut spl_sum = 0.0;
    for ep in &eps {
        let cand = &by_id[&ep.id].instruction;
        items.push(CorpusItem {
            candidate: cand.clone(),
            references: vec![ep.instruction.clone()],
        });
        let scene = ds.episode_scene(ep)?;
        let start = ep.trajectory.poses[0];
        let r = follow_instruction(&scene, &start, cand);
        sr += r.success as u8 as f64;
        spl_sum += spl(r.success, ep.trajectory.path_length(), r.path_length);
    }
    let n = eps.len().max(1) as f64;
    Ok(EvalReport {
        metrics: evaluate_all(&items, &split.to_string()),
        success_rate: sr / n,
        spl: spl_sum / n,
    })
}

pub fn cmd_eval(generations: &Path, data: &Path, split: Split, out: Option<&Path>) -> Result<EvalReport> {
    let ds = load_dataset(data)?;
    let file = GenerationFile::load(generations)?;
    if file.split != split {
        return Err(Error::Invalid(format!("generation file is for the {} split, not {split}", file.split)));
    }
    let report = evaluate_generation(&ds, split, &file.episodes)?;
    if let Some(p) = out {
        std::fs::write(p, report.to_record())?;
    }
    Ok(report)
}
