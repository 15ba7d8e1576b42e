use bevinstructor::cli::pipeline::{build_instructor, examples, frozen_hash};
use bevinstructor::cli::RunConfig;
use bevinstructor::fusion::VisualMode;
use bevinstructor::lm::{Vocabulary, BOS, END, LANDMARK_MODE, SEP};
use bevinstructor::numerics::{AdamW, Graph, ParameterStore, Precision, Tag};
use bevinstructor::refine::*;
use bevinstructor::simworld::{Dataset, Landmark, Split};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config() -> RunConfig {
    let mut c = RunConfig::desk();
    for (k, v) in [
        ("n_train", "64"),
        ("n_seen", "2"),
        ("n_unseen", "8"),
        ("bev_scenes", "8"),
        ("d", "16"),
        ("fusion_heads", "2"),
        ("fusion_blocks", "1"),
        ("compressor_blocks", "1"),
        ("n_q", "4"),
        ("n_p", "4"),
        ("d_lm", "32"),
        ("m_l", "2"),
        ("n_a", "1"),
        ("lm_heads", "2"),
        ("lm_ffn_mult", "2"),
        ("warmup_epochs", "3"),
    ] {
        c.set(k, v).unwrap();
    }
    c.validate().unwrap();
    c
}

fn fixture() -> (RunConfig, Vec<EpisodeExample>) {
    let cfg = small_config();
    let ds = Dataset::generate(&cfg.data_spec()).unwrap();
    let ex = examples(&cfg, &ds, Split::Train, None).unwrap();
    (cfg, ex)
}

fn instructor(cfg: &RunConfig, seed: u64) -> (Instructor, ParameterStore) {
    let mut store = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = Instructor::new(&mut store, &mut rng, &cfg.instructor(VisualMode::Perspective)).unwrap();
    (m, store)
}

#[test]
fn sequences_supervise_only_the_body() {
    let s = train::Sequence::new(&[BOS, LANDMARK_MODE], &[10, 11]);
    assert_eq!(s.tokens, vec![BOS, LANDMARK_MODE, 10, 11]);
    assert_eq!(s.targets, vec![LANDMARK_MODE, 10, 11, END]);
    assert_eq!(s.mask, vec![false, true, true, true]);

    let v = Vocabulary::new();
    let red_sofa = Landmark { color: 0, category: 2 };
    let p = train::instruction_prefix(&v, &[red_sofa]);
    assert_eq!(p.len(), 4);
    assert_eq!((p[0], p[3]), (BOS, SEP));
    assert_eq!(train::instruction_prefix(&v, &[]), vec![BOS]);
}

#[test]
fn long_drafts_are_cut_at_phrase_boundaries() {
    let v = Vocabulary::new();
    let many: Vec<Landmark> = (0..40).map(|i| Landmark { color: i % 4, category: i % 6 }).collect();
    let ids = train::draft_tokens(&v, &many);
    assert!(ids.len() <= train::MAX_DRAFT);
    let kept = v.parse_draft(&ids);
    assert_eq!(kept[..], many[..kept.len()]);
    assert_eq!(v.draft_ids(&kept), ids);
}

#[test]
fn merged_drafts_keep_first_seen_order() {
    let a = Landmark { color: 0, category: 1 };
    let b = Landmark { color: 2, category: 3 };
    let c = Landmark { color: 1, category: 1 };
    assert_eq!(merge_drafts(&[a, b, a], &[c, b]), vec![a, b, c]);
    assert!(merge_drafts(&[], &[]).is_empty());
}

#[test]
fn zero_landmark_weight_is_the_instruction_loss() {
    let (cfg, ex) = fixture();
    let (m, store) = instructor(&cfg, 1);
    for e in &ex[..4] {
        let mut g = Graph::new(Precision::F64);
        let joint = joint_loss(&m, &mut g, &store, e, 0.0).unwrap();
        let ins = task_loss(&m, &mut g, &store, e, Task::Instructions, true).unwrap();
        assert_eq!(g.value(joint).item(), g.value(ins).item());
        let both = joint_loss(&m, &mut g, &store, e, 0.5).unwrap();
        let lm = task_loss(&m, &mut g, &store, e, Task::Landmarks, true).unwrap();
        let want = 0.5 * g.value(lm).item() + g.value(ins).item();
        assert!((g.value(both).item() - want).abs() < 1e-12);
    }
}

#[test]
fn a_step_leaves_frozen_parameters_alone() {
    let (cfg, ex) = fixture();
    let mut store = ParameterStore::new();
    let m = build_instructor(&cfg, VisualMode::Perspective, &mut store, 2).unwrap();
    let before = store.clone();
    let hash = frozen_hash(&store);
    let batch: Vec<&EpisodeExample> = ex.iter().take(4).collect();
    let opt = AdamW::default();
    for task in [Task::Landmarks, Task::Instructions] {
        training_step(&m, &mut store, &batch, task, true, &opt, 1.0).unwrap();
    }
    assert_eq!(frozen_hash(&store), hash);
    let mut moved = 0;
    for (id, p) in store.iter() {
        match p.tag() {
            Tag::Frozen => assert_eq!(p.value(), before.value(id), "{}", p.name()),
            Tag::Tuned => moved += (p.value() != before.value(id)) as usize,
        }
    }
    assert!(moved > 0);
    assert!(training_step(&m, &mut store, &[], Task::Landmarks, true, &opt, 1.0).is_err());
}

#[test]
fn refinement_stage_identities() {
    let (cfg, ex) = fixture();
    let (m, mut store) = instructor(&cfg, 3);
    // Open the gates so outputs depend on the visual input.
    for l in &m.decoder.layers {
        if let Some(g) = l.gate {
            store.value_mut(g).data_mut().fill(1.0);
        }
    }
    let p = m.prompt_tensor(&store, &ex[0].visual).unwrap();
    let direct = m.generate_direct(&store, &p).unwrap();
    assert_eq!(m.refine_instruction(&store, &p, &[]).unwrap(), direct);
    let zero = m.iterative_refine(&store, &p, 0).unwrap();
    assert_eq!(zero.len(), 1);
    assert_eq!(zero[0].instruction, m.vocab.decode(&direct));
    assert!(zero[0].draft.is_empty());

    let one = m.iterative_refine(&store, &p, 1).unwrap();
    let two = m.iterative_refine(&store, &p, 2).unwrap();
    assert_eq!(two.len(), 2);
    assert_eq!(one[0], two[0]);
    assert_eq!(two, m.iterative_refine(&store, &p, 2).unwrap());

    let draft = m.generate_landmarks(&store, &p).unwrap();
    assert_eq!(one[0].draft, draft.iter().map(Landmark::phrase).collect::<Vec<_>>());
    assert_eq!(draft, m.generate_landmarks(&store, &p).unwrap());
}

#[test]
fn closed_gates_make_drafts_blind() {
    let (cfg, ex) = fixture();
    let (m, store) = instructor(&cfg, 4);
    let a = m.prompt_tensor(&store, &ex[0].visual).unwrap();
    let b = m.prompt_tensor(&store, &ex[1].visual).unwrap();
    assert_ne!(a, b);
    assert_eq!(m.generate_landmarks(&store, &a).unwrap(), m.generate_landmarks(&store, &b).unwrap());
}

fn epoch_means(losses: &[f64]) -> Vec<f64> {
    // One epoch is eight steps over the 64 episodes.
    losses.chunks(8).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}

#[test]
fn instruction_loss_falls_steadily_over_200_steps() {
    // A single task, so each epoch average covers the whole fixture once.
    let (cfg, ex) = fixture();
    let (m, mut store) = instructor(&cfg, 5);
    let tc = TrainConfig {
        iterations: 200,
        batch: 8,
        lr: 1e-3,
        refinement: false,
        ..TrainConfig::default()
    };
    let losses = train(&m, &mut store, &ex, &tc, |_, task, _| assert_eq!(task, Task::Instructions)).unwrap();
    let epochs = epoch_means(&losses);
    let down = epochs.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(
        down * 5 >= (epochs.len() - 1) * 4,
        "{down} of {} epoch pairs decrease: {epochs:?}",
        epochs.len() - 1
    );
}

#[test]
fn joint_training_reduces_the_loss_and_drafts_steer_the_output() {
    let (cfg, ex) = fixture();
    let (m, mut store) = instructor(&cfg, 5);
    let tc = TrainConfig {
        iterations: 200,
        batch: 8,
        lr: 3e-3,
        ..TrainConfig::default()
    };
    let mut tasks = [0usize; 2];
    let losses = train(&m, &mut store, &ex, &tc, |_, task, _| tasks[(task == Task::Landmarks) as usize] += 1).unwrap();
    assert_eq!(losses.len(), 200);
    assert!(tasks[0] > 60 && tasks[1] > 60, "{tasks:?}");
    let epochs = epoch_means(&losses);
    let tail = epochs[epochs.len() - 5..].iter().sum::<f64>() / 5.0;
    assert!(tail < 0.5 * epochs[0], "{epochs:?}");

    // A trained model reads its draft: another episode's draft usually
    // changes the instruction.
    let mut differ = 0;
    let n = 16;
    for i in 0..n {
        let p = m.prompt_tensor(&store, &ex[i].visual).unwrap();
        let own = m.refine_instruction(&store, &p, &ex[i].landmarks).unwrap();
        let other = m.refine_instruction(&store, &p, &ex[(i + 7) % ex.len()].landmarks).unwrap();
        differ += (own != other) as usize;
    }
    assert!(differ * 2 >= n, "{differ} of {n}");

    // Drafts only ever hold grammar phrases.
    let v = Vocabulary::new();
    for e in &ex[..8] {
        let p = m.prompt_tensor(&store, &e.visual).unwrap();
        for l in m.generate_landmarks(&store, &p).unwrap() {
            assert!(v.id(l.words()[0]).is_some() && v.id(l.words()[1]).is_some());
        }
    }
}

#[test]
fn warm_up_trains_only_the_base_and_freezes_it() {
    let (cfg, ex) = fixture();
    let mut store = ParameterStore::new();
    let m = build_instructor(&cfg, VisualMode::Perspective, &mut store, 6).unwrap();
    let before = store.clone();
    let corpus = warm_up_corpus(&m, &ex);
    assert!(corpus.len() >= 2 * ex.len());
    let losses = warm_up(&m, &mut store, &corpus, &cfg.warm_up()).unwrap();
    assert_eq!(losses.len(), 3);
    assert!(losses[2] < losses[0]);
    for (id, p) in store.iter() {
        let base = p.name().starts_with("lm.base.");
        if base {
            assert_eq!(p.tag(), Tag::Frozen);
        } else {
            assert_eq!(p.value(), before.value(id), "{} moved during warm-up", p.name());
        }
    }
    assert!(store.tuned_fraction() > 0.0);
}
