//! Desk-scale acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line; the tests take a shared lock so their timings do not overlap.

mod common;

use std::f64::consts::PI;
use std::io::Write as _;
use std::path::Path;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use bevinstructor::bev::{depth_consistency_weight, hungarian, BevModel};
use bevinstructor::cli::pipeline::*;
use bevinstructor::cli::{run_ablation, AblationTable, RunConfig};
use bevinstructor::fusion::VisualMode;
use bevinstructor::gradsuite;
use bevinstructor::lm::{Decoder, BOS};
use bevinstructor::metrics::*;
use bevinstructor::numerics::{Graph, ParameterStore, Precision, Tag, Tensor};
use bevinstructor::simworld::follower::follow_instruction;
use bevinstructor::simworld::render::render_view;
use bevinstructor::simworld::trajectory::Pose;
use bevinstructor::simworld::*;
use common::oracles::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Prints the verdict past the test harness's output capture, then asserts it.
fn verdict(n: usize, title: &str, pass: bool, detail: &str) {
    let line = format!("criterion {n:>2}: {} {title}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "{line}");
}

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

/// Desk data, a desk BEV model pretrained on it and the pretraining time.
struct Desk {
    cfg: RunConfig,
    ds: Dataset,
    bev: BevModel,
    store: ParameterStore,
    report: BevReport,
    pretrain_time: Duration,
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let cfg = RunConfig::desk();
        let dir = tempfile::tempdir().unwrap();
        cmd_gen_data(&cfg, dir.path()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        let clock = Instant::now();
        let (bev, store, report) = pretrain_bev(&cfg, &ds).unwrap();
        Desk {
            cfg,
            ds,
            bev,
            store,
            report,
            pretrain_time: clock.elapsed(),
        }
    })
}

fn ablation() -> &'static (AblationTable, Duration) {
    static TABLE: OnceLock<(AblationTable, Duration)> = OnceLock::new();
    TABLE.get_or_init(|| {
        let d = desk();
        let clock = Instant::now();
        let t = run_ablation(&d.cfg, &d.ds, &d.bev, &d.store).unwrap();
        let _ = std::io::stdout().lock().write_all(t.render().as_bytes());
        (t, clock.elapsed())
    })
}

#[test]
fn c01_gradient_suite() {
    let _g = serial();
    let clock = Instant::now();
    let results = gradsuite::run(10).unwrap();
    let secs = clock.elapsed().as_secs_f64();
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} ({:.2e})", r.name, r.max_rel_err))
        .collect();
    let worst = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    verdict(
        1,
        "gradient suite",
        failed.is_empty() && secs <= 300.0 && results.iter().all(|r| r.seeds == 10),
        &format!(
            "{} cases x 10 seeds, worst rel err {worst:.2e}, {secs:.1}s, failures {failed:?}",
            results.len()
        ),
    );
}

#[test]
fn c02_geometry_oracles() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rig = CameraRig::default();
    let cams = rig.cameras();
    let mut round_trip: f64 = 0.0;
    let mut n = 0;
    while n < 1000 {
        let pose = Pose {
            position: [rng.random_range(0.0..8.0), rng.random_range(0.0..8.0), 0.0],
            heading: rng.random_range(0.0..2.0 * PI),
            elevation: 0.0,
        };
        let cam = &cams[rng.random_range(0..cams.len())];
        let p = [
            pose.position[0] + rng.random_range(-6.0..6.0),
            pose.position[1] + rng.random_range(-6.0..6.0),
            rng.random_range(-1.0..4.0),
        ];
        if let Some((u, v, d)) = cam.project(p, &pose) {
            let q = cam.unproject(u, v, d, &pose);
            round_trip = (0..3).map(|i| (p[i] - q[i]).abs()).fold(round_trip, f64::max);
            n += 1;
        }
    }
    let world = WorldParams::default();
    let mut depth: f64 = 0.0;
    let mut pixels = 0;
    for seed in 0..8 {
        let s = generate_scene(seed, &world).unwrap();
        let free = s.free_cells();
        let pose = Pose::at_cell(free[rng.random_range(0..free.len())], rng.random_range(0..4));
        for cam in &cams {
            let v = render_view(&s, &pose, cam, &rig);
            for row in 0..rig.image_h {
                for col in 0..rig.image_w {
                    let (o, d) = cam.pixel_ray(&pose, row, col);
                    let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                    let want = oracle_depth(&s, o, d.map(|x| x / len), rig.max_range);
                    depth = depth.max((v.depth[row * rig.image_w + col] - want).abs());
                    pixels += 1;
                }
            }
        }
    }
    verdict(
        2,
        "geometry oracles",
        round_trip <= 1e-9 && depth <= 1e-9,
        &format!("round trip {round_trip:.1e} m over 1000 points, depth {depth:.1e} m over {pixels} pixels"),
    );
}

#[test]
fn c03_consistency_weight_range() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut lo: f64 = 1.0;
    let mut hi: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..16);
        let mut draw = || -> Vec<f64> {
            let mut v: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..5.0) }).collect();
            if v.iter().all(|&x| x == 0.0) {
                v[0] = 1.0;
            }
            v
        };
        let (a, b) = (draw(), draw());
        let w = depth_consistency_weight(&a, &b).unwrap();
        lo = lo.min(w);
        hi = hi.max(w);
    }
    let n_d = RunConfig::desk().n_d;
    let uniform = vec![1.0 / n_d as f64; n_d];
    let mut hot = vec![0.0; n_d];
    hot[n_d / 2] = 1.0;
    let err = (depth_consistency_weight(&uniform, &hot).unwrap() - 1.0 / (n_d as f64).sqrt()).abs();
    verdict(
        3,
        "consistency weight range",
        lo >= 0.0 && hi <= 1.0 && err <= 1e-12,
        &format!("range [{lo:.4}, {hi:.4}] over 1000 pairs, uniform vs one-hot error {err:.1e}"),
    );
}

#[test]
fn c04_zero_gate_identity() {
    let _g = serial();
    let cfg = RunConfig::desk().decoder();
    let mut worst_equal = true;
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let dec = Decoder::new(&mut store, &mut rng, &cfg, Tag::Tuned).unwrap();
        let steps = 1 + seed as usize;
        let n = steps * cfg.n_prompts * cfg.visual_dim;
        let visual = Tensor::new(vec![steps * cfg.n_prompts, cfg.visual_dim], (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let tokens: Vec<usize> = std::iter::once(BOS).chain((0..20).map(|_| rng.random_range(5..cfg.vocab))).collect();
        let mut g = Graph::new(Precision::F64);
        let v = g.constant(visual);
        let p = dec.build_prompts(&mut g, &store, v).unwrap();
        let with = dec.forward(&mut g, &store, Some(p), &tokens).unwrap();
        let without = dec.forward(&mut g, &store, None, &tokens).unwrap();
        worst_equal &= g.value(with) == g.value(without);
    }
    verdict(
        4,
        "zero-gate identity",
        worst_equal,
        &format!("desk decoder ({} layers, {} gated), 5 seeds, bitwise comparison", cfg.layers, cfg.gated_layers),
    );
}

#[test]
fn c05_parameter_efficiency() {
    let _g = serial();
    let d = desk();
    let cfg = &d.cfg;
    let train: Vec<&EpisodeRecord> = d.ds.split(Split::Train).into_iter().take(8).collect();
    let vocab = bevinstructor::lm::Vocabulary::new();
    let exs: Vec<_> = train
        .iter()
        .map(|ep| {
            let f = bev_features(cfg, &d.bev, &d.store, ep).unwrap();
            bevinstructor::refine::EpisodeExample::new(ep, &vocab, Some(f)).unwrap()
        })
        .collect();
    let mut store = d.store.clone();
    let model = build_instructor(cfg, VisualMode::Fusion, &mut store, cfg.seed).unwrap();
    model.freeze_base(&mut store);
    let before = store.clone();
    let trained = finish_training(cfg, model, store, &exs, true, 10, cfg.seed, Vec::new()).unwrap();
    let log = &trained.log;
    let mut identical = log.frozen_hash_start == log.frozen_hash_end;
    let mut moved = 0;
    for (id, p) in trained.store.iter() {
        match p.tag() {
            Tag::Frozen => identical &= p.value() == before.value(id),
            Tag::Tuned => moved += (p.value() != before.value(id)) as usize,
        }
    }
    verdict(
        5,
        "parameter efficiency",
        identical && moved > 0 && log.tuned_fraction <= 0.15,
        &format!(
            "frozen bit-identical {identical}, tuned fraction {:.4} ({} of {} scalars, frozen BEV included), {moved} tuned tensors moved",
            log.tuned_fraction, log.tuned_scalars, log.total_scalars
        ),
    );
}

#[test]
fn c06_metric_oracles() {
    let _g = serial();
    let corpora = vec![
        vec![
            ("walk forward . pass the red sofa . stop at the blue lamp .", vec!["walk forward . pass the red sofa . turn left . stop at the blue lamp ."]),
            ("turn left . go toward the green bed .", vec!["turn left . go toward the green bed . stop .", "turn right ."]),
            ("stop .", vec!["walk forward . walk forward . stop at the yellow chair ."]),
        ],
        vec![
            ("a b c d e f", vec!["a c e b d f", "f e d"]),
            ("x y x y", vec!["y x y x y"]),
            ("go toward the red lamp . stop .", vec!["go toward the red lamp . stop .", "stop at the red lamp ."]),
            ("turn right . turn right .", vec!["turn right ."]),
            ("", vec!["walk forward ."]),
        ],
    ];
    let mut err: f64 = 0.0;
    for c in &corpora {
        let items: Vec<CorpusItem> = c
            .iter()
            .map(|(cand, refs)| CorpusItem {
                candidate: toks(cand),
                references: refs.iter().map(|r| toks(r)).collect(),
            })
            .collect();
        for it in &items {
            for n in 1..=4 {
                err = err.max((bleu(&it.candidate, &it.references, n) - oracle_bleu(&it.candidate, &it.references, n)).abs());
            }
            err = err.max((rouge_l(&it.candidate, &it.references) - oracle_rouge(&it.candidate, &it.references)).abs());
        }
        for (a, b) in cider(&items).iter().zip(oracle_cider(&items)) {
            err = err.max((a - b).abs());
        }
    }
    let refs = ["walk forward . pass the red sofa .", "turn left . stop at the blue lamp .", "go toward the green bed . stop ."];
    let items: Vec<CorpusItem> = refs
        .iter()
        .map(|r| CorpusItem {
            candidate: toks(r),
            references: vec![toks(r)],
        })
        .collect();
    let rep = evaluate_all(&items, "identity");
    let meteor_id = items.iter().map(|i| 1.0 - 0.5 * (1.0 / i.candidate.len() as f64).powi(3)).sum::<f64>() / 3.0;
    let identity = rep.bleu4 == 1.0
        && rep.bleu1 == 1.0
        && (rep.rouge - 1.0).abs() < 1e-12
        && (rep.cider - 10.0).abs() < 1e-9
        && rep.spice == 1.0
        && (rep.meteor - meteor_id).abs() < 1e-12;
    verdict(
        6,
        "metric oracles",
        err <= 1e-9 && identity,
        &format!(
            "max oracle gap {err:.1e}; identity BLEU-4 {} ROUGE {:.4} CIDEr {:.4} SPICE {} METEOR {:.6}",
            rep.bleu4, rep.rouge, rep.cider, rep.spice, rep.meteor
        ),
    );
}

#[test]
fn c07_detection_pretraining() {
    let _g = serial();
    let d = desk();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut matching = true;
    for _ in 0..200 {
        let n = rng.random_range(1..=6);
        let m = rng.random_range(n..=8);
        let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
        let a = hungarian(&cost).unwrap();
        let total: f64 = a.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        matching &= (total - permutations_min(&cost)).abs() < 1e-9;
    }
    let secs = d.pretrain_time.as_secs_f64();
    let r = &d.report;
    verdict(
        7,
        "detection pretraining",
        r.held_in_map >= 0.5 && r.unseen_map > 0.0 && secs <= 600.0 && matching && d.cfg.bev_scenes == 64,
        &format!(
            "held-in mAP@0.5 {:.4} ({} frames), unseen {:.4} ({} frames), {secs:.0}s, matching vs brute force {matching}",
            r.held_in_map, r.held_in_frames, r.unseen_map, r.unseen_frames
        ),
    );
}

#[test]
fn c08_grammar_round_trip() {
    let _g = serial();
    let ds = Dataset::generate(&RunConfig::desk().data_spec()).unwrap();
    let mut ok = 0;
    for ep in &ds.episodes {
        let scene = ds.episode_scene(ep).unwrap();
        ok += follow_instruction(&scene, &ep.trajectory.poses[0], &ep.instruction).success as usize;
    }
    let n = ds.episodes.len();
    verdict(
        8,
        "grammar round trip",
        ok == n,
        &format!("follower SR {:.4} on {n} reference instructions", ok as f64 / n as f64),
    );
}

#[test]
fn c09_ablation_trend() {
    let _g = serial();
    let (t, time) = ablation();
    let c = t.checks();
    let secs = time.as_secs_f64();
    verdict(
        9,
        "ablation trend",
        c.ablation_holds() && secs <= 1500.0,
        &format!(
            "full beats perspective on {:?} of 4 headline metrics per seed, fusion CIDEr > concat {:?}, {secs:.0}s",
            c.full_over_perspective, c.fusion_over_concat_cider
        ),
    );
}

#[test]
fn c10_refinement_trend() {
    let _g = serial();
    let (t, _) = ablation();
    let c = t.checks();
    let cider: Vec<[f64; 3]> = t.refinement.iter().map(|r| [r[0].cider, r[1].cider, r[2].cider]).collect();
    verdict(
        10,
        "refinement trend",
        c.refinement_holds(),
        &format!(
            "CIDEr per seed (steps 0, 1, 2) {cider:.4?}; one >= base {:?}, two - one {:.4?}",
            c.one_over_base_cider, c.two_minus_one_cider
        ),
    );
}

/// Every file of a pipeline run, by relative path.
fn run_pipeline(cfg: &RunConfig, dir: &Path) -> Vec<(String, Vec<u8>)> {
    let p = |s: &str| dir.join(s);
    let conf = common::config_file(dir, cfg);
    let loaded = RunConfig::load(&conf).unwrap();
    cmd_gen_data(&loaded, &p("data")).unwrap();
    cmd_pretrain_bev(&loaded, &p("data"), &p("bev.ckpt")).unwrap();
    cmd_train(&loaded, &p("data"), &p("bev.ckpt"), &p("model.ckpt")).unwrap();
    cmd_generate(&loaded, &p("model.ckpt"), &p("data"), Split::Unseen, loaded.refine_steps, &p("gen.json")).unwrap();
    cmd_eval(&p("gen.json"), &p("data"), Split::Unseen, Some(&p("eval.txt"))).unwrap();
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn c11_reproducibility() {
    let _g = serial();
    let cfg = common::tiny_config();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let fa = run_pipeline(&cfg, a.path());
    let fb = run_pipeline(&cfg, b.path());
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    let differing: Vec<&str> = fa.iter().zip(&fb).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    let has = |s: &str| names.iter().any(|n| n.ends_with(s));
    verdict(
        11,
        "end-to-end reproducibility",
        fa.len() == fb.len() && differing.is_empty() && has("model.ckpt") && has("eval.txt") && has(".report.json"),
        &format!("{} files compared bytewise, differing {differing:?}", fa.len()),
    );
}
