//! Finite-difference checks of every differentiable operation and of each
//! composed module on small random instances.

use std::f64::consts::PI;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bev::train::frame_loss;
use crate::bev::{BevConfig, BevFrame, BevModel, GtBox, PretrainConfig};
use crate::encoder::{EmbeddingTables, EpisodeInputs};
use crate::error::Result;
use crate::fusion::{FusionConfig, FusionStack, VisualMode};
use crate::layers::LN_EPS;
use crate::lm::{Decoder, DecoderConfig, Vocabulary};
use crate::numerics::{GradCheck, GradCheckReport, Graph, ParameterStore, Tag, Tensor, Var};
use crate::refine::{joint_loss, EpisodeExample, EpisodeVisual, Instructor, InstructorConfig};
use crate::simworld::{CameraRig, Landmark, Pose, ViewFeatureMap};

pub const TOLERANCE: f64 = 1e-4;

/// Module cases contain parameters whose exact gradient is zero (key biases
/// under softmax shift invariance), where finite differences return pure
/// roundoff of order 1e-10. Their errors are judged against this floor.
pub const MODULE_FLOOR: f64 = 1e-5;

fn module_check() -> GradCheck {
    GradCheck {
        floor: MODULE_FLOOR,
        ..GradCheck::default()
    }
}

/// Outcome of one case over all seeds.
#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub seeds: usize,
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: Option<(String, usize)>,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

type Case = fn(u64) -> Result<GradCheckReport>;

/// Names and bodies of every case.
pub fn cases() -> Vec<(&'static str, Case)> {
    vec![
        ("matmul", op_matmul as Case),
        ("elementwise", op_elementwise),
        ("slicing", op_slicing),
        ("softmax", op_softmax),
        ("layer_norm", op_layer_norm),
        ("gelu_tanh", op_gelu_tanh),
        ("attention", op_attention),
        ("cross_entropy", op_cross_entropy),
        ("l1_cosine", op_l1_cosine),
        ("bilinear_sample", op_bilinear),
        ("weighted_row_sum", op_weighted_row_sum),
        ("segment_sum", op_segment_sum),
        ("gather", op_gather),
        ("perspective_action_embedding", module_encoder),
        ("bev_encoder_detection", module_bev),
        ("fusion_compressor", module_fusion),
        ("prompted_decoder", module_decoder),
        ("joint_objective", module_joint),
    ]
}

/// Runs every case over `seeds` seeds.
pub fn run(seeds: u64) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for (name, case) in cases() {
        let mut res = CaseResult {
            name,
            seeds: seeds as usize,
            max_rel_err: 0.0,
            checked: 0,
            worst: None,
        };
        for seed in 0..seeds {
            let r = case(seed)?;
            res.checked += r.checked;
            if r.max_rel_err >= res.max_rel_err {
                res.max_rel_err = r.max_rel_err;
                res.worst = r.worst.map(|(n, i)| (format!("{n} (seed {seed})"), i));
            }
        }
        out.push(res);
    }
    Ok(out)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Scalar read-out through a fixed random weighting.
fn project(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = g.constant(random(&mut rng, &shape));
    let p = g.mul(x, w)?;
    Ok(g.sum_all(p))
}

fn inputs(seed: u64, shapes: &[&[usize]]) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes.iter().map(|s| random(&mut rng, s)).collect()
}

fn check(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> Result<GradCheckReport> {
    GradCheck::default().check_inputs(inputs, f)
}

fn op_matmul(seed: u64) -> Result<GradCheckReport> {
    check(&inputs(seed, &[&[3, 4], &[4, 5]]), |g, v| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y, seed)
    })
}

fn op_elementwise(seed: u64) -> Result<GradCheckReport> {
    check(&inputs(seed, &[&[3, 4], &[3, 4], &[4]]), |g, v| {
        let s = g.add(v[0], v[1])?;
        let d = g.sub(s, v[0])?;
        let m = g.mul(s, d)?;
        let r = g.add_row(m, v[2])?;
        let r = g.mul_row(r, v[2])?;
        let r = g.scale(r, 0.7);
        project(g, r, seed)
    })
}

fn op_slicing(seed: u64) -> Result<GradCheckReport> {
    check(&inputs(seed, &[&[3, 4], &[3, 4]]), |g, v| {
        let r = g.concat_rows(&[v[0], v[1]])?;
        let c = g.concat_cols(&[v[0], v[1]])?;
        let s1 = g.slice_rows(r, 2, 3)?;
        let s2 = g.slice_cols(c, 3, 4)?;
        let picked = g.row_gather(s1, &[2, 0, 2])?;
        let y = g.add(s2, picked)?;
        let y = g.mean_rows(y);
        project(g, y, seed)
    })
}

fn op_softmax(seed: u64) -> Result<GradCheckReport> {
    check(&inputs(seed, &[&[3, 5]]), |g, v| {
        let s = g.softmax(v[0]);
        project(g, s, seed)
    })
}

fn op_layer_norm(seed: u64) -> Result<GradCheckReport> {
    check(&inputs(seed, &[&[3, 6]]), |g, v| {
        let s = g.layer_norm(v[0], LN_EPS);
        project(g, s, seed)
    })
}

fn op_gelu_tanh(seed: u64) -> Result<GradCheckReport> {
    check(&inputs(seed, &[&[3, 4]]), |g, v| {
        let s = g.gelu(v[0]);
        let t = g.tanh(s);
        project(g, t, seed)
    })
}

fn op_attention(seed: u64) -> Result<GradCheckReport> {
    let mut mask = Tensor::zeros(&[3, 5]);
    mask.data_mut()[4] = f64::NEG_INFINITY;
    mask.data_mut()[7] = -0.7;
    check(&inputs(seed, &[&[6, 8], &[10, 8], &[10, 6]]), |g, v| {
        let y = g.attention(v[0], v[1], v[2], 2, 2, Some(&mask))?;
        project(g, y, seed)
    })
}

fn op_cross_entropy(seed: u64) -> Result<GradCheckReport> {
    check(&inputs(seed, &[&[4, 6]]), |g, v| {
        g.cross_entropy(v[0], &[1, 5, 0, 2], &[true, false, true, true])
    })
}

fn op_l1_cosine(seed: u64) -> Result<GradCheckReport> {
    check(&inputs(seed, &[&[3, 4], &[3, 4]]), |g, v| {
        let l = g.l1(v[0], v[1])?;
        let c = g.cosine_rows(v[0], v[1])?;
        let s = g.sum_all(c);
        g.add(l, s)
    })
}

fn op_bilinear(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fmap = random(&mut rng, &[3, 4, 5]);
    // Locations kept off the texel grid, where the sampler has kinks.
    let locs: Vec<f64> = (0..12)
        .map(|i| {
            let mut x: f64 = rng.random_range(-0.8..4.8);
            let frac = x - x.floor();
            if !(0.1..=0.9).contains(&frac) {
                x = x.floor() + 0.5;
            }
            if i % 2 == 1 {
                x = x.min(3.7);
            }
            x
        })
        .collect();
    let locs = Tensor::new(vec![6, 2], locs)?;
    check(&[fmap, locs], |g, v| {
        let y = g.bilinear_sample(v[0], v[1])?;
        project(g, y, seed)
    })
}

fn op_weighted_row_sum(seed: u64) -> Result<GradCheckReport> {
    check(&inputs(seed, &[&[3, 4], &[12, 5]]), |g, v| {
        let y = g.weighted_row_sum(v[0], v[1])?;
        project(g, y, seed)
    })
}

fn op_segment_sum(seed: u64) -> Result<GradCheckReport> {
    let seg = Rc::new(vec![2, 0, 2, 1, 2]);
    check(&inputs(seed, &[&[5], &[5, 3]]), |g, v| {
        let y = g.segment_sum(v[0], v[1], seg.clone(), 4)?;
        project(g, y, seed)
    })
}

fn op_gather(seed: u64) -> Result<GradCheckReport> {
    let idx = Rc::new(vec![Some(5), None, Some(0), Some(5)]);
    check(&inputs(seed, &[&[2, 3]]), |g, v| {
        let y = g.gather(v[0], idx.clone(), &[2, 2])?;
        let y = g.reshape(y, &[4, 1])?;
        project(g, y, seed)
    })
}

const DP: usize = 5;

fn episode_inputs(rng: &mut ChaCha8Rng, steps: usize, views: usize) -> Result<EpisodeInputs> {
    let mut codes = random(rng, &[steps * views, 4]);
    codes.data_mut().iter_mut().for_each(|c| *c = c.abs());
    let action_views: Vec<usize> = (0..steps).map(|t| if t + 1 == steps { 0 } else { 1 + t % views }).collect();
    Ok(EpisodeInputs {
        steps,
        views,
        pooled: random(rng, &[steps * views, DP]),
        codes,
        action_pooled: random(rng, &[steps, DP]),
        action_codes: random(rng, &[steps, 4]),
        action_views,
    })
}

fn module_encoder(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let tables = EmbeddingTables::new(&mut store, &mut rng, DP, 6, 4, Tag::Tuned)?;
    let inp = episode_inputs(&mut rng, 3, 2)?;
    module_check().check_params(&mut store, |g, s| {
        let (p, a) = tables.episode(g, s, &inp)?;
        let both = g.concat_rows(&[p, a])?;
        let y = g.tanh(both);
        project(g, y, seed)
    })
}

fn module_bev(seed: u64) -> Result<GradCheckReport> {
    let cfg = BevConfig {
        h_b: 3,
        w_b: 3,
        range: (-2.0, 2.0),
        n_ref: 2,
        height_range: (-1.0, 0.5),
        n_d: 4,
        depth_range: (0.5, 4.0),
        blocks: 1,
        heads: 2,
        offsets: 2,
        dim: 8,
        ffn_mult: 1,
        depth_hidden: 3,
        depth_scale: 10.0,
    };
    let rig = CameraRig {
        image_w: 16,
        image_h: 16,
        ..CameraRig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let model = BevModel::new(&mut store, &mut rng, &cfg, DP, 3, Tag::Tuned)?;
    // Nonzero offsets so sampling locations depend on the parameters.
    let off = model.encoder.blocks[0].offsets.w;
    store.value_mut(off).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
    let views: Vec<ViewFeatureMap> = (0..rig.n_views)
        .map(|_| ViewFeatureMap {
            data: Tensor::new(vec![DP, 4, 4], (0..DP * 16).map(|_| rng.random_range(0.0..1.0)).collect()).expect("shape"),
            depth_target: (0..16).map(|_| rng.random_range(0.3..5.0)).collect(),
        })
        .collect();
    let pose = Pose {
        position: [4.5, 4.5, 0.0],
        heading: rng.random_range(0.0..2.0 * PI),
        elevation: 0.0,
    };
    let frame = BevFrame {
        input: model.frame_input(&views, &rig.cameras(), &pose, 4)?,
        gt: vec![GtBox {
            class: 1,
            bbox: [0.7, -0.4, 0.4, 0.5, 0.6, 0.8],
        }],
    };
    let pc = PretrainConfig::default();
    module_check().check_params(&mut store, |g, s| frame_loss(&model, g, s, &frame, &pc))
}

fn small_fusion() -> FusionConfig {
    FusionConfig {
        dim: 8,
        bev_dim: 6,
        fusion_blocks: 1,
        compressor_blocks: 1,
        heads: 2,
        n_q: 3,
        ffn_mult: 1,
    }
}

fn module_fusion(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let cfg = small_fusion();
    let stack = FusionStack::new(&mut store, &mut rng, &cfg, Tag::Tuned)?;
    let steps = 2;
    let bev = random(&mut rng, &[steps * 4, cfg.bev_dim]);
    let persp = random(&mut rng, &[steps * 2, cfg.dim]);
    let action = random(&mut rng, &[steps, cfg.dim]);
    module_check().check_params(&mut store, |g, s| {
        let b = g.constant(bev.clone());
        let p = g.constant(persp.clone());
        let a = g.constant(action.clone());
        let o = stack.visual_tokens(g, s, VisualMode::Fusion, p, a, Some(b), steps)?;
        project(g, o, seed)
    })
}

fn small_decoder() -> DecoderConfig {
    DecoderConfig {
        vocab: Vocabulary::new().len(),
        dim: 8,
        layers: 2,
        heads: 2,
        ffn_mult: 2,
        gated_layers: 1,
        max_len: 16,
        visual_dim: 8,
        n_prompts: 3,
        scale_all_layers: false,
    }
}

/// Gates start at zero, which would hide the prompt path; give them values.
fn open_gates(store: &mut ParameterStore, dec: &Decoder, rng: &mut ChaCha8Rng) {
    for l in &dec.layers {
        if let Some(gate) = l.gate {
            store.value_mut(gate).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
    }
}

fn module_decoder(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let cfg = small_decoder();
    let dec = Decoder::new(&mut store, &mut rng, &cfg, Tag::Tuned)?;
    open_gates(&mut store, &dec, &mut rng);
    store.set_tag_prefix(crate::lm::decoder::BASE_PREFIX, Tag::Frozen);
    let visual = random(&mut rng, &[2 * cfg.n_prompts, cfg.visual_dim]);
    let tokens = [1, 7, 9, 3, 12];
    let targets = [7, 9, 3, 12, 2];
    module_check().check_params(&mut store, |g, s| {
        let v = g.constant(visual.clone());
        let p = dec.build_prompts(g, s, v)?;
        let logits = dec.forward(g, s, Some(p), &tokens)?;
        g.cross_entropy(logits, &targets, &[true; 5])
    })
}

fn module_joint(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let cfg = InstructorConfig {
        feat_dim: DP,
        t_max: 4,
        fusion: FusionConfig {
            bev_dim: 8,
            ..small_fusion()
        },
        decoder: small_decoder(),
        mode: VisualMode::Fusion,
    };
    let model = Instructor::new(&mut store, &mut rng, &cfg)?;
    model.prompt_tuning_tags(&mut store);
    open_gates(&mut store, &model.decoder, &mut rng);
    let steps = 2;
    let ex = EpisodeExample {
        id: 0,
        visual: EpisodeVisual {
            inputs: episode_inputs(&mut rng, steps, 2)?,
            bev: Some(random(&mut rng, &[steps * 4, 8])),
        },
        instruction: vec![6, 9, 5],
        landmarks: vec![Landmark { color: 1, category: 2 }],
    };
    module_check().check_params(&mut store, |g, s| joint_loss(&model, g, s, &ex, 0.5))
}
