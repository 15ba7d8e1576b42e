//! Component ablation over visual sources, fusion and refinement, plus the
//! refinement-steps study on the full model.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use super::config::RunConfig;
use super::pipeline::{
    evaluate_generation, examples, finish_training, generate_all, subset, build_instructor, BevReport,
};
use crate::bev::BevModel;
use crate::error::Result;
use crate::fusion::VisualMode;
use crate::lm::decoder::BASE_PREFIX;
use crate::metrics::{mean_report, MetricReport};
use crate::numerics::ParameterStore;
use crate::refine::{warm_up, warm_up_corpus};
use crate::simworld::{mix_seed, Dataset, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct RowSpec {
    pub index: usize,
    pub name: &'static str,
    pub perspective: bool,
    pub bev: bool,
    pub fusion: bool,
    pub refinement: bool,
}

impl RowSpec {
    pub fn mode(&self) -> VisualMode {
        match (self.perspective, self.bev, self.fusion) {
            (true, false, _) => VisualMode::Perspective,
            (false, true, _) => VisualMode::Bev,
            (true, true, false) => VisualMode::Concat,
            _ => VisualMode::Fusion,
        }
    }
}

const fn row(index: usize, name: &'static str, perspective: bool, bev: bool, fusion: bool, refinement: bool) -> RowSpec {
    RowSpec {
        index,
        name,
        perspective,
        bev,
        fusion,
        refinement,
    }
}

pub const ROWS: [RowSpec; 6] = [
    row(1, "perspective", true, false, false, false),
    row(2, "bev", false, true, false, false),
    row(3, "concat", true, true, false, false),
    row(4, "fusion", true, true, true, false),
    row(5, "concat+refine", true, true, false, true),
    row(6, "full", true, true, true, true),
];

pub const STUDY_STEPS: [usize; 3] = [0, 1, 2];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub spec: RowSpec,
    /// Unseen-split report of each seed.
    pub per_seed: Vec<MetricReport>,
    pub mean: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub config_hash: String,
    pub iterations: usize,
    pub seeds: Vec<u64>,
    pub warm_up_losses: Vec<f64>,
    pub rows: Vec<AblationRow>,
    /// Full-model reports at each of [`STUDY_STEPS`], per seed.
    pub refinement: Vec<Vec<MetricReport>>,
}

/// Outcome of the trend checks, one entry per seed.
#[derive(Clone, Debug, PartialEq)]
pub struct TrendChecks {
    /// Headline metrics on which the full row beats the perspective row.
    pub full_over_perspective: Vec<usize>,
    pub fusion_over_concat_cider: Vec<bool>,
    pub one_over_base_cider: Vec<bool>,
    /// CIDEr of two steps minus one step.
    pub two_minus_one_cider: Vec<f64>,
}

impl TrendChecks {
    fn majority(v: impl Iterator<Item = bool>, n: usize) -> bool {
        v.filter(|&b| b).count() * 3 >= 2 * n
    }

    pub fn ablation_holds(&self) -> bool {
        let n = self.full_over_perspective.len();
        Self::majority(self.full_over_perspective.iter().map(|&w| w >= 3), n)
            && Self::majority(self.fusion_over_concat_cider.iter().copied(), n)
    }

    pub fn refinement_holds(&self) -> bool {
        let n = self.one_over_base_cider.len();
        Self::majority(self.one_over_base_cider.iter().copied(), n)
            && self.two_minus_one_cider.iter().all(|&d| d >= -0.02)
    }
}

impl AblationTable {
    pub fn row(&self, index: usize) -> &AblationRow {
        &self.rows[index - 1]
    }

    pub fn checks(&self) -> TrendChecks {
        let n = self.seeds.len();
        let (p, c, f, full) = (self.row(1), self.row(3), self.row(4), self.row(6));
        TrendChecks {
            full_over_perspective: (0..n)
                .map(|s| {
                    full.per_seed[s]
                        .headline()
                        .iter()
                        .zip(p.per_seed[s].headline())
                        .filter(|(a, b)| a.1 > b.1)
                        .count()
                })
                .collect(),
            fusion_over_concat_cider: (0..n).map(|s| f.per_seed[s].cider > c.per_seed[s].cider).collect(),
            one_over_base_cider: self.refinement.iter().map(|r| r[1].cider >= r[0].cider).collect(),
            two_minus_one_cider: self.refinement.iter().map(|r| r[2].cider - r[1].cider).collect(),
        }
    }

    /// Mean table in the layout of the component ablation.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<3} {:<14} {:^5} {:^5} {:^5} {:^5} | {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}",
            "#", "row", "P", "BEV", "Fuse", "Ref", "SPICE", "BLEU-1", "BLEU-4", "CIDEr", "METEOR", "ROUGE"
        );
        let mark = |b: bool| if b { "x" } else { "" };
        for r in &self.rows {
            let m = &r.mean;
            let _ = writeln!(
                s,
                "{:<3} {:<14} {:^5} {:^5} {:^5} {:^5} | {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
                r.spec.index,
                r.spec.name,
                mark(r.spec.perspective),
                mark(r.spec.bev),
                mark(r.spec.fusion),
                mark(r.spec.refinement),
                m.spice,
                m.bleu1,
                m.bleu4,
                m.cider,
                m.meteor,
                m.rouge
            );
        }
        let _ = writeln!(s, "\nrefinement steps (full model, mean over seeds)");
        for (k, steps) in STUDY_STEPS.iter().enumerate() {
            let reps: Vec<MetricReport> = self.refinement.iter().map(|r| r[k].clone()).collect();
            let m = mean_report(&reps, "unseen");
            let _ = writeln!(
                s,
                "steps {steps}: SPICE {:.4} BLEU-4 {:.4} CIDEr {:.4} METEOR {:.4} ROUGE {:.4}",
                m.spice, m.bleu4, m.cider, m.meteor, m.rouge
            );
        }
        s
    }
}

/// Runs every row for every seed on the unseen split. BEV features and the
/// warmed-up base decoder are computed once and shared by all runs.
pub fn run_ablation(
    cfg: &RunConfig,
    ds: &Dataset,
    bev: &BevModel,
    bev_store: &ParameterStore,
) -> Result<AblationTable> {
    let clock = Instant::now();
    let train = examples(cfg, ds, Split::Train, Some((bev, bev_store)))?;
    let unseen = examples(cfg, ds, Split::Unseen, Some((bev, bev_store)))?;
    log::info!("cached BEV features in {:.1}s", clock.elapsed().as_secs_f64());

    let mut base_store = bev_store.clone();
    let base_model = build_instructor(cfg, VisualMode::Fusion, &mut base_store, cfg.seed)?;
    let corpus = warm_up_corpus(&base_model, &train);
    let warm = warm_up(&base_model, &mut base_store, &corpus, &cfg.warm_up())?;
    let base = subset(&base_store, BASE_PREFIX)?;
    log::info!("warm-up done in {:.1}s: {warm:?}", clock.elapsed().as_secs_f64());

    let seeds: Vec<u64> = (0..cfg.ablate_seeds as u64).map(|s| mix_seed(cfg.seed, 100 + s)).collect();
    let mut per_row: Vec<Vec<MetricReport>> = vec![Vec::new(); ROWS.len()];
    let mut refinement = Vec::new();
    for &seed in &seeds {
        for (r, spec) in ROWS.iter().enumerate() {
            let mut store = bev_store.clone();
            let model = build_instructor(cfg, spec.mode(), &mut store, seed)?;
            store.load_values_from(&base)?;
            let trained = finish_training(cfg, model, store, &train, spec.refinement, cfg.ablate_iterations, seed, warm.clone())?;
            let steps = if spec.refinement { cfg.refine_steps } else { 0 };
            let gen = generate_all(&trained.model, &trained.store, &unseen, steps)?;
            let rep = evaluate_generation(ds, Split::Unseen, &gen)?.metrics;
            log::info!(
                "seed {seed} row {} ({}): CIDEr {:.4} SPICE {:.4} at {:.1}s",
                spec.index,
                spec.name,
                rep.cider,
                rep.spice,
                clock.elapsed().as_secs_f64()
            );
            if spec.index == 6 {
                let mut study = Vec::new();
                for s in STUDY_STEPS {
                    if s == steps {
                        study.push(rep.clone());
                    } else {
                        let g = generate_all(&trained.model, &trained.store, &unseen, s)?;
                        study.push(evaluate_generation(ds, Split::Unseen, &g)?.metrics);
                    }
                }
                refinement.push(study);
            }
            per_row[r].push(rep);
        }
    }
    let rows = ROWS
        .iter()
        .zip(per_row)
        .map(|(spec, per_seed)| AblationRow {
            spec: *spec,
            mean: mean_report(&per_seed, "unseen"),
            per_seed,
        })
        .collect();
    Ok(AblationTable {
        config_hash: cfg.hash(),
        iterations: cfg.ablate_iterations,
        seeds,
        warm_up_losses: warm,
        rows,
        refinement,
    })
}

/// Loads or pretrains the BEV model, then runs the ablation.
pub fn cmd_ablate(
    cfg: &RunConfig,
    data: &std::path::Path,
    bev_ckpt: Option<&std::path::Path>,
) -> Result<(AblationTable, Option<BevReport>)> {
    let ds = super::pipeline::load_dataset(data)?;
    let (bev, store, report) = match bev_ckpt {
        Some(p) => {
            let (m, s) = super::pipeline::load_bev(cfg, p)?;
            (m, s, None)
        }
        None => {
            let (m, s, r) = super::pipeline::pretrain_bev(cfg, &ds)?;
            (m, s, Some(r))
        }
    };
    Ok((run_ablation(cfg, &ds, &bev, &store)?, report))
}
