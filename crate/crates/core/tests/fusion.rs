use bevinstructor::fusion::{interleave_steps, FusionConfig, FusionStack, VisualMode};
use bevinstructor::numerics::{Graph, ParameterStore, Precision, Tag, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg() -> FusionConfig {
    FusionConfig {
        dim: 8,
        bev_dim: 6,
        fusion_blocks: 2,
        compressor_blocks: 2,
        heads: 2,
        n_q: 3,
        ffn_mult: 2,
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn stack(seed: u64, cfg: &FusionConfig) -> (FusionStack, ParameterStore, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let s = FusionStack::new(&mut store, &mut rng, cfg, Tag::Tuned).unwrap();
    (s, store, rng)
}

fn fuse(s: &FusionStack, store: &ParameterStore, bev: &Tensor, ctx: &Tensor, steps: usize) -> Tensor {
    let mut g = Graph::new(Precision::F64);
    let (b, c) = (g.constant(bev.clone()), g.constant(ctx.clone()));
    let out = s.fuse(&mut g, store, b, c, steps).unwrap();
    g.value(out).clone()
}

fn compress(s: &FusionStack, store: &ParameterStore, tokens: &Tensor, steps: usize) -> Tensor {
    let mut g = Graph::new(Precision::F64);
    let t = g.constant(tokens.clone());
    let out = s.compress(&mut g, store, t, steps).unwrap();
    g.value(out).clone()
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Rows of `t` reordered per step by `perm` (applied within each block of `per` rows).
fn permute_within_steps(t: &Tensor, steps: usize, per: usize, perm: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..steps)
        .flat_map(|s| perm.iter().map(move |&p| s * per + p))
        .map(|r| t.row(r).to_vec())
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

#[test]
fn zeroed_cross_attention_ignores_context() {
    let c = cfg();
    let (s, mut store, mut rng) = stack(3, &c);
    for b in &s.blocks {
        store.value_mut(b.cross_attn.o.w).data_mut().fill(0.0);
        store.value_mut(b.cross_attn.o.b.unwrap()).data_mut().fill(0.0);
    }
    let steps = 2;
    let bev = random(&mut rng, &[steps * 9, c.bev_dim]);
    let a = fuse(&s, &store, &bev, &random(&mut rng, &[steps * 5, c.dim]), steps);
    let b = fuse(&s, &store, &bev, &random(&mut rng, &[steps * 5, c.dim]), steps);
    assert_eq!(a, b);
    // With the weights intact the context matters.
    let (s2, store2, mut rng2) = stack(3, &c);
    let bev = random(&mut rng2, &[steps * 9, c.bev_dim]);
    let a = fuse(&s2, &store2, &bev, &random(&mut rng2, &[steps * 5, c.dim]), steps);
    let b = fuse(&s2, &store2, &bev, &random(&mut rng2, &[steps * 5, c.dim]), steps);
    assert!(max_diff(&a, &b) > 1e-3);
}

#[test]
fn fusion_is_invariant_to_context_order() {
    let c = cfg();
    let (s, store, mut rng) = stack(5, &c);
    let steps = 3;
    let bev = random(&mut rng, &[steps * 9, c.bev_dim]);
    let ctx = random(&mut rng, &[steps * 5, c.dim]);
    let shuffled = permute_within_steps(&ctx, steps, 5, &[3, 0, 4, 2, 1]);
    assert!(max_diff(&fuse(&s, &store, &bev, &ctx, steps), &fuse(&s, &store, &bev, &shuffled, steps)) < 1e-12);
}

#[test]
fn compressor_ignores_duplicates_and_order() {
    let c = cfg();
    let (s, store, mut rng) = stack(7, &c);
    let steps = 2;
    let tokens = random(&mut rng, &[steps * 6, c.dim]);
    let base = compress(&s, &store, &tokens, steps);
    assert_eq!(base.shape(), &[steps * c.n_q, c.dim]);

    let mut g = Graph::new(Precision::F64);
    let t = g.constant(tokens.clone());
    let doubled = interleave_steps(&mut g, &[t, t], steps).unwrap();
    let doubled = g.value(doubled).clone();
    assert_eq!(doubled.rows(), steps * 12);
    assert!(max_diff(&base, &compress(&s, &store, &doubled, steps)) < 1e-12);

    let shuffled = permute_within_steps(&tokens, steps, 6, &[5, 3, 1, 0, 2, 4]);
    assert!(max_diff(&base, &compress(&s, &store, &shuffled, steps)) < 1e-12);
}

#[test]
fn steps_are_independent() {
    // Each step's output depends only on that step's inputs.
    let c = cfg();
    let (s, store, mut rng) = stack(9, &c);
    let bev = random(&mut rng, &[2 * 4, c.bev_dim]);
    let ctx = random(&mut rng, &[2 * 3, c.dim]);
    let persp_first = fuse(&s, &store, &bev, &ctx, 2);
    let mut bev2 = bev.clone();
    bev2.data_mut()[4 * c.bev_dim..].iter_mut().for_each(|v| *v += 0.5);
    let changed = fuse(&s, &store, &bev2, &ctx, 2);
    assert_eq!(persp_first.data()[..4 * c.dim], changed.data()[..4 * c.dim]);
    assert_ne!(persp_first.data()[4 * c.dim..], changed.data()[4 * c.dim..]);
}

#[test]
fn mode_contracts() {
    let c = cfg();
    let (s, store, mut rng) = stack(11, &c);
    let steps = 2;
    let persp = random(&mut rng, &[steps * 4, c.dim]);
    let action = random(&mut rng, &[steps, c.dim]);
    let bev = random(&mut rng, &[steps * 9, c.bev_dim]);
    let run = |mode: VisualMode, bev: Option<&Tensor>| {
        let mut g = Graph::new(Precision::F64);
        let p = g.constant(persp.clone());
        let a = g.constant(action.clone());
        let b = bev.map(|b| g.constant(b.clone()));
        s.visual_tokens(&mut g, &store, mode, p, a, b, steps).map(|v| g.value(v).clone())
    };
    for mode in [VisualMode::Perspective, VisualMode::Bev, VisualMode::Concat, VisualMode::Fusion] {
        assert_eq!(run(mode, Some(&bev)).unwrap().shape(), &[steps * c.n_q, c.dim]);
    }
    // The perspective path ignores BEV entirely.
    assert_eq!(run(VisualMode::Perspective, None).unwrap(), run(VisualMode::Perspective, Some(&bev)).unwrap());
    assert!(run(VisualMode::Fusion, None).is_err());
    assert!(run(VisualMode::Bev, None).is_err());
    assert_eq!("concat".parse::<VisualMode>().unwrap(), VisualMode::Concat);
    assert!("other".parse::<VisualMode>().is_err());
}

#[test]
fn shape_mismatches_are_errors() {
    let c = cfg();
    let (s, store, mut rng) = stack(13, &c);
    let mut g = Graph::new(Precision::F64);
    let bad_width = g.constant(random(&mut rng, &[4, c.bev_dim + 1]));
    let ctx = g.constant(random(&mut rng, &[4, c.dim]));
    assert!(s.fuse(&mut g, &store, bad_width, ctx, 2).is_err());
    let bev = g.constant(random(&mut rng, &[5, c.bev_dim]));
    assert!(s.fuse(&mut g, &store, bev, ctx, 2).is_err());
    let tokens = g.constant(random(&mut rng, &[6, c.dim]));
    assert!(s.compress(&mut g, &store, tokens, 0).is_err());
    assert!(FusionConfig { heads: 3, ..cfg() }.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn output_rows_are_steps_times_queries(steps in 1usize..4, k in 1usize..5, q in 1usize..10, n_q in 1usize..5, seed in 0u64..1000) {
        let c = FusionConfig { n_q, fusion_blocks: 1, compressor_blocks: 1, ..cfg() };
        let (s, store, mut rng) = stack(seed, &c);
        let mut g = Graph::new(Precision::F64);
        let p = g.constant(random(&mut rng, &[steps * k, c.dim]));
        let a = g.constant(random(&mut rng, &[steps, c.dim]));
        let b = g.constant(random(&mut rng, &[steps * q, c.bev_dim]));
        let o = s.visual_tokens(&mut g, &store, VisualMode::Fusion, p, a, Some(b), steps).unwrap();
        prop_assert_eq!(g.shape(o), &[steps * n_q, c.dim][..]);
        prop_assert!(g.value(o).data().iter().all(|v| v.is_finite()));
    }
}
