use bevinstructor::encoder::{pool, EmbeddingTables, EpisodeInputs};
use bevinstructor::numerics::{GradCheck, Graph, ParameterStore, Precision, Tag, Tensor};
use bevinstructor::simworld::dataset::DataSpec;
use bevinstructor::simworld::{orientation_code, CameraRig, Dataset, WorldParams};
use bevinstructor::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DP: usize = 5;
const D: usize = 6;
const TMAX: usize = 8;

fn tables(seed: u64) -> (ParameterStore, EmbeddingTables) {
    let mut store = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = EmbeddingTables::new(&mut store, &mut rng, DP, D, TMAX, Tag::Tuned).unwrap();
    // Give biases nonzero values so the oracle exercises them.
    for id in t.params() {
        for v in store.value_mut(id).data_mut() {
            if *v == 0.0 {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }
    (store, t)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn perspective(store: &ParameterStore, t: &EmbeddingTables, pooled: &Tensor, codes: &Tensor, steps: &[usize]) -> Tensor {
    let mut g = Graph::new(Precision::F64);
    let p = g.constant(pooled.clone());
    let c = g.constant(codes.clone());
    let out = t.perspective(&mut g, store, p, c, steps).unwrap();
    g.value(out).clone()
}

fn action(store: &ParameterStore, t: &EmbeddingTables, pooled: &Tensor, codes: &Tensor, steps: &[usize], views: &[usize]) -> Tensor {
    let mut g = Graph::new(Precision::F64);
    let p = g.constant(pooled.clone());
    let c = g.constant(codes.clone());
    let out = t.action(&mut g, store, p, c, steps, views).unwrap();
    g.value(out).clone()
}

/// `x W + b` computed entry by entry.
fn dense(store: &ParameterStore, l: &bevinstructor::layers::Linear, x: &[f64]) -> Vec<f64> {
    let w = store.value(l.w);
    (0..l.out_dim)
        .map(|j| {
            let b = l.b.map(|b| store.value(b).data()[j]).unwrap_or(0.0);
            b + (0..l.in_dim).map(|i| x[i] * w.at(i, j)).sum::<f64>()
        })
        .collect()
}

#[test]
fn zero_tables_give_zero_embedding() {
    let (mut store, t) = tables(1);
    for id in t.params() {
        for v in store.value_mut(id).data_mut() {
            *v = 0.0;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let out = perspective(&store, &t, &random(&mut rng, &[3, DP]), &random(&mut rng, &[3, 4]), &[0, 1, 2]);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn perspective_matches_term_by_term_oracle() {
    let (store, t) = tables(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pooled = random(&mut rng, &[5, DP]);
    let codes = random(&mut rng, &[5, 4]);
    let steps = [0, 3, 7, 2, 2];
    let out = perspective(&store, &t, &pooled, &codes, &steps);
    for r in 0..5 {
        let a = dense(&store, &t.e_p, pooled.row(r));
        let b = dense(&store, &t.e_delta, codes.row(r));
        for j in 0..D {
            let want = a[j] + b[j] + store.value(t.e_t).at(steps[r], j) + store.value(t.e_o).data()[j];
            assert!((out.at(r, j) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn orientation_difference_is_linear() {
    let (store, t) = tables(5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let f = random(&mut rng, &[1, DP]);
    let pooled = Tensor::from_rows(&[f.row(0).to_vec(), f.row(0).to_vec()]).unwrap();
    let d1 = orientation_code(0.3, 0.1);
    let d2 = orientation_code(2.0, -0.2);
    let codes = Tensor::from_rows(&[d1.to_vec(), d2.to_vec()]).unwrap();
    let out = perspective(&store, &t, &pooled, &codes, &[1, 1]);
    let e1 = dense(&store, &t.e_delta, &d1);
    let e2 = dense(&store, &t.e_delta, &d2);
    for j in 0..D {
        assert!((out.at(0, j) - out.at(1, j) - (e1[j] - e2[j])).abs() < 1e-12);
    }
}

#[test]
fn perspective_and_action_differ_by_construction() {
    let (store, t) = tables(7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pooled = random(&mut rng, &[1, DP]);
    let codes = random(&mut rng, &[1, 4]);
    let p = perspective(&store, &t, &pooled, &codes, &[4]);
    let a = action(&store, &t, &pooled, &codes, &[4], &[2]);
    let ep = dense(&store, &t.e_p, pooled.row(0));
    let ea = dense(&store, &t.e_a, pooled.row(0));
    for j in 0..D {
        let want = ep[j] - ea[j] + store.value(t.e_o).data()[j] - store.value(t.e_a_type).data()[j];
        assert!((p.at(0, j) - a.at(0, j) - want).abs() < 1e-12);
    }
}

#[test]
fn stop_action_ignores_observation() {
    let (store, t) = tables(9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let codes = random(&mut rng, &[1, 4]);
    let a1 = action(&store, &t, &random(&mut rng, &[1, DP]), &codes, &[2], &[0]);
    let a2 = action(&store, &t, &random(&mut rng, &[1, DP]), &codes, &[2], &[0]);
    assert_eq!(a1, a2);
    let stop = store.value(t.stop_feature).data().to_vec();
    let ea = dense(&store, &t.e_a, &stop);
    let eb = dense(&store, &t.e_delta, codes.row(0));
    for j in 0..D {
        let want = ea[j] + eb[j] + store.value(t.e_t).at(2, j) + store.value(t.e_a_type).data()[j];
        assert!((a1.at(0, j) - want).abs() < 1e-12);
    }
}

#[test]
fn step_out_of_range_is_an_error() {
    let (store, t) = tables(11);
    let mut g = Graph::new(Precision::F64);
    let p = g.constant(Tensor::zeros(&[1, DP]));
    let c = g.constant(Tensor::zeros(&[1, 4]));
    assert!(matches!(t.perspective(&mut g, &store, p, c, &[TMAX]), Err(Error::Range(_))));
    assert!(matches!(t.action(&mut g, &store, p, c, &[TMAX], &[1]), Err(Error::Range(_))));
}

#[test]
fn action_gradients_match_finite_differences() {
    for seed in 0..3 {
        let (mut store, t) = tables(20 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pooled = random(&mut rng, &[3, DP]);
        let codes = random(&mut rng, &[3, 4]);
        let w = random(&mut rng, &[3, D]);
        let report = GradCheck::default()
            .check_params(&mut store, |g, s| {
                let p = g.constant(pooled.clone());
                let c = g.constant(codes.clone());
                let a = t.action(g, s, p, c, &[0, 1, 2], &[1, 0, 3])?;
                let wv = g.constant(w.clone());
                let m = g.mul(a, wv)?;
                let m = g.tanh(m);
                Ok(g.sum_all(m))
            })
            .unwrap();
        assert!(report.max_rel_err <= 1e-4, "{report:?}");
    }
}

#[test]
fn episode_inputs_pool_each_view() {
    let spec = DataSpec {
        world: WorldParams::default(),
        rig: CameraRig::default(),
        patch: 4,
        n_train: 2,
        n_seen: 0,
        n_unseen: 0,
        seed: 3,
    };
    let ds = Dataset::generate(&spec).unwrap();
    let ep = &ds.episodes[0];
    let inp = EpisodeInputs::from_record(ep).unwrap();
    assert_eq!(inp.pooled.shape(), &[ep.steps() * 4, ep.features[0][0].channels()]);
    assert_eq!(inp.pooled.row(4 + 2), pool(&ep.features[1][2]).as_slice());
    let views = ep.action_views();
    for (t, &a) in views.iter().enumerate() {
        if a == 0 {
            assert!(inp.action_pooled.row(t).iter().all(|&v| v == 0.0));
        } else {
            assert_eq!(inp.action_pooled.row(t), pool(&ep.features[t][a - 1]).as_slice());
        }
    }
}

proptest! {
    #[test]
    fn time_difference_is_table_difference(t1 in 0usize..TMAX, t2 in 0usize..TMAX, seed in 0u64..50) {
        let (store, t) = tables(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let f = random(&mut rng, &[1, DP]);
        let c = random(&mut rng, &[1, 4]);
        let pooled = Tensor::from_rows(&[f.row(0).to_vec(), f.row(0).to_vec()]).unwrap();
        let codes = Tensor::from_rows(&[c.row(0).to_vec(), c.row(0).to_vec()]).unwrap();
        let out = perspective(&store, &t, &pooled, &codes, &[t1, t2]);
        let et = store.value(t.e_t);
        for j in 0..D {
            prop_assert!((out.at(0, j) - out.at(1, j) - (et.at(t1, j) - et.at(t2, j))).abs() < 1e-12);
        }
    }

    #[test]
    fn orientation_codes_lie_on_unit_circles(h in -10.0f64..10.0, e in -3.0f64..3.0) {
        let c = orientation_code(h, e);
        prop_assert!((c[0] * c[0] + c[1] * c[1] - 1.0).abs() < 1e-12);
        prop_assert!((c[2] * c[2] + c[3] * c[3] - 1.0).abs() < 1e-12);
    }
}
