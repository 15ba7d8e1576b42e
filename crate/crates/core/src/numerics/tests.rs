use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn check(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> crate::Result<Var>) -> f64 {
    GradCheck::default().check_inputs(inputs, f).unwrap().max_rel_err
}

/// Reduces any tensor to a scalar through a fixed random projection so every
/// output entry contributes to the gradient.
fn project(g: &mut Graph, x: Var, seed: u64) -> crate::Result<Var> {
    let shape = g.shape(x).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = g.constant(rand_tensor(&mut rng, &shape));
    let p = g.mul(x, w)?;
    Ok(g.sum_all(p))
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::default();
    let x = g.constant(rand_tensor(&mut rng, &[5, 7]));
    let x = g.scale(x, 30.0);
    let y = g.softmax(x);
    for r in 0..5 {
        let s: f64 = g.value(y).row(r).iter().sum();
        assert!((s - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn layer_norm_standardizes_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::default();
    let x = g.constant(rand_tensor(&mut rng, &[4, 16]));
    let y = g.layer_norm(x, crate::layers::LN_EPS);
    for r in 0..4 {
        let row = g.value(y).row(r);
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() <= 1e-9);
        assert!((var - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn masked_attention_is_uniform_over_unmasked_keys() {
    // Equal keys give equal scores, so the unmasked keys share weight evenly.
    let mut g = Graph::default();
    let q = g.constant(Tensor::full(&[2, 4], 0.3));
    let k = g.constant(Tensor::full(&[5, 4], 0.7));
    let v = g.constant(Tensor::new(vec![5, 1], vec![1., 2., 3., 4., 5.]).unwrap());
    let mut mask = Tensor::zeros(&[2, 5]);
    mask.data_mut()[1] = f64::NEG_INFINITY;
    mask.data_mut()[3] = f64::NEG_INFINITY;
    mask.data_mut()[5 + 4] = f64::NEG_INFINITY;
    let out = g.attention(q, k, v, 1, 1, Some(&mask)).unwrap();
    let p = g.attention_probs(out).unwrap();
    assert_eq!(&p[..5], &[1.0 / 3.0, 0.0, 1.0 / 3.0, 0.0, 1.0 / 3.0]);
    assert!((g.value(out).at(0, 0) - 3.0).abs() < 1e-12);
    assert!((g.value(out).at(1, 0) - 2.5).abs() < 1e-12);
}

#[test]
fn fully_masked_row_yields_zero() {
    let mut g = Graph::default();
    let q = g.constant(Tensor::full(&[1, 2], 1.0));
    let k = g.constant(Tensor::full(&[2, 2], 1.0));
    let v = g.constant(Tensor::full(&[2, 2], 1.0));
    let mask = Tensor::full(&[1, 2], f64::NEG_INFINITY);
    let out = g.attention(q, k, v, 1, 1, Some(&mask)).unwrap();
    assert_eq!(g.value(out).data(), &[0.0, 0.0]);
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut g = Graph::default();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 5]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn bilinear_on_texel_and_midpoint() {
    let fmap = Tensor::new(vec![2, 2, 3], vec![1., 2., 3., 4., 5., 6., 10., 20., 30., 40., 50., 60.]).unwrap();
    let mut g = Graph::default();
    let f = g.constant(fmap);
    let locs = g.constant(Tensor::new(vec![3, 2], vec![2.0, 1.0, 0.5, 0.0, -5.0, 0.0]).unwrap());
    let out = g.bilinear_sample(f, locs).unwrap();
    let t = g.value(out);
    assert_eq!(t.row(0), &[6.0, 60.0]);
    assert_eq!(t.row(1), &[1.5, 15.0]);
    assert_eq!(t.row(2), &[0.0, 0.0]);
}

#[test]
fn reused_value_accumulates_both_paths() {
    // f(x) = sum(x ⊙ x + 3x) -> df/dx = 2x + 3
    let x0 = Tensor::vector(vec![0.5, -1.5, 2.0]);
    let err = check(&[x0.clone()], |g, v| {
        let sq = g.mul(v[0], v[0])?;
        let lin = g.scale(v[0], 3.0);
        let s = g.add(sq, lin)?;
        Ok(g.sum_all(s))
    });
    assert!(err < 1e-9);
    let mut g = Graph::default();
    let x = g.input(x0);
    let sq = g.mul(x, x).unwrap();
    let lin = g.scale(x, 3.0);
    let s = g.add(sq, lin).unwrap();
    let out = g.sum_all(s);
    let grad = g.backward(out).unwrap().of(x).unwrap();
    assert_eq!(grad.data(), &[4.0, 0.0, 7.0]);
}

#[test]
fn f32_mode_rounds_values() {
    let mut g = Graph::new(Precision::F32);
    let x = g.constant(Tensor::scalar(0.1));
    let y = g.scale(x, 1.0);
    assert_eq!(g.value(y).item(), 0.1f32 as f64);
}

#[test]
fn deterministic_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inputs = [rand_tensor(&mut rng, &[6, 8]), rand_tensor(&mut rng, &[6, 8])];
    let run = || {
        let mut g = Graph::default();
        let a = g.input(inputs[0].clone());
        let b = g.input(inputs[1].clone());
        let out = g.attention(a, b, b, 2, 2, None).unwrap();
        let s = project(&mut g, out, 3).unwrap();
        let gr = g.backward(s).unwrap();
        (gr.of(a).unwrap(), gr.of(b).unwrap())
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert_eq!(a1, a2);
    assert_eq!(b1, b2);
}

#[test]
fn every_op_matches_finite_differences() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 5]);
        let c = rand_tensor(&mut rng, &[3, 4]);
        let row = rand_tensor(&mut rng, &[4]);
        let tol = 1e-4;

        let e = check(&[a.clone(), b.clone()], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, seed)
        });
        assert!(e <= tol, "matmul seed {seed}: {e}");

        let e = check(&[a.clone(), c.clone(), row.clone()], |g, v| {
            let s = g.add(v[0], v[1])?;
            let m = g.mul(s, v[1])?;
            let r = g.add_row(m, v[2])?;
            let r = g.mul_row(r, v[2])?;
            project(g, r, seed)
        });
        assert!(e <= tol, "elementwise seed {seed}: {e}");

        let e = check(&[a.clone(), c.clone()], |g, v| {
            let r = g.concat_rows(&[v[0], v[1]])?;
            let cc = g.concat_cols(&[v[0], v[1]])?;
            let s1 = g.slice_rows(r, 2, 3)?;
            let s2 = g.slice_cols(cc, 3, 4)?;
            let gathered = g.row_gather(s1, &[2, 0, 2])?;
            let y = g.add(s2, gathered)?;
            project(g, y, seed)
        });
        assert!(e <= tol, "structure seed {seed}: {e}");

        let e = check(&[a.clone()], |g, v| {
            let s = g.softmax(v[0]);
            project(g, s, seed)
        });
        assert!(e <= tol, "softmax seed {seed}: {e}");

        let e = check(&[a.clone()], |g, v| {
            let s = g.layer_norm(v[0], crate::layers::LN_EPS);
            project(g, s, seed)
        });
        assert!(e <= tol, "layer_norm seed {seed}: {e}");

        let e = check(&[a.clone()], |g, v| {
            let s = g.gelu(v[0]);
            let t = g.tanh(s);
            project(g, t, seed)
        });
        assert!(e <= tol, "gelu/tanh seed {seed}: {e}");

        let table = rand_tensor(&mut rng, &[6, 4]);
        let e = check(&[table], |g, v| {
            let y = g.row_gather(v[0], &[5, 1, 1, 3])?;
            project(g, y, seed)
        });
        assert!(e <= tol, "embedding seed {seed}: {e}");

        let q = rand_tensor(&mut rng, &[6, 8]);
        let k = rand_tensor(&mut rng, &[10, 8]);
        let vv = rand_tensor(&mut rng, &[10, 6]);
        let mut mask = Tensor::zeros(&[3, 5]);
        mask.data_mut()[4] = f64::NEG_INFINITY;
        mask.data_mut()[7] = -0.7;
        let e = check(&[q, k, vv], |g, v| {
            let y = g.attention(v[0], v[1], v[2], 2, 2, Some(&mask))?;
            project(g, y, seed)
        });
        assert!(e <= tol, "attention seed {seed}: {e}");

        let logits = rand_tensor(&mut rng, &[4, 6]);
        let e = check(&[logits], |g, v| g.cross_entropy(v[0], &[1, 5, 0, 2], &[true, false, true, true]));
        assert!(e <= tol, "cross_entropy seed {seed}: {e}");

        let e = check(&[a.clone(), c.clone()], |g, v| {
            let l = g.l1(v[0], v[1])?;
            let cs = g.cosine_rows(v[0], v[1])?;
            let s = g.sum_all(cs);
            g.add(l, s)
        });
        assert!(e <= tol, "l1/cosine seed {seed}: {e}");

        let fmap = rand_tensor(&mut rng, &[3, 4, 5]);
        let locs: Vec<f64> = (0..12)
            .map(|i| {
                let base: f64 = rng.random_range(-0.8..4.8);
                // stay clear of texel-grid lines
                let off = base - base.floor();
                let base = if off < 0.1 || off > 0.9 { base.floor() + 0.5 } else { base };
                if i % 2 == 0 { base } else { base.min(3.7) }
            })
            .collect();
        let locs = Tensor::new(vec![6, 2], locs).unwrap();
        let e = check(&[fmap, locs], |g, v| {
            let y = g.bilinear_sample(v[0], v[1])?;
            project(g, y, seed)
        });
        assert!(e <= 1e-5, "bilinear seed {seed}: {e}");

        let w = rand_tensor(&mut rng, &[3, 4]);
        let vals = rand_tensor(&mut rng, &[12, 5]);
        let e = check(&[w, vals], |g, v| {
            let y = g.weighted_row_sum(v[0], v[1])?;
            let m = g.mean_rows(y);
            project(g, m, seed)
        });
        assert!(e <= tol, "weighted_row_sum seed {seed}: {e}");

        let w = rand_tensor(&mut rng, &[5]);
        let vals = rand_tensor(&mut rng, &[5, 3]);
        let seg = Rc::new(vec![2, 0, 2, 1, 2]);
        let e = check(&[w, vals], |g, v| {
            let y = g.segment_sum(v[0], v[1], seg.clone(), 4)?;
            project(g, y, seed)
        });
        assert!(e <= tol, "segment_sum seed {seed}: {e}");

        let src = rand_tensor(&mut rng, &[2, 3]);
        let idx = Rc::new(vec![Some(5), None, Some(0), Some(5)]);
        let e = check(&[src], |g, v| {
            let y = g.gather(v[0], idx.clone(), &[2, 2])?;
            let y = g.reshape(y, &[4, 1])?;
            project(g, y, seed)
        });
        assert!(e <= tol, "gather seed {seed}: {e}");
    }
}
