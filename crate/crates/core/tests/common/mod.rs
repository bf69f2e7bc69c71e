//! The pinned `blobs-K4-1shot` fixture shared by the acceptance target.
//! `configs/blobs-k4-1shot.toml` at the workspace root holds the same values.

#![allow(dead_code)]

use std::time::Instant;

use uidm::data::{make_blobs_shift, ssda_split};
use uidm::mixup::MixupConfig;
use uidm::training::{pretrain, run_method, Method, PretrainMetrics, RunMetrics, TrainConfig};
use uidm::uncertainty::UncertaintyConfig;
use uidm::ModelConfig;

pub const FIXTURE_NAME: &str = "blobs-K4-1shot";
pub const K: usize = 4;
pub const N_PER_CLASS: usize = 100;
pub const DIM: usize = 4;
pub const SHIFT_SCALE: f64 = 1.25;
pub const SPREAD: f64 = 0.4;
pub const DATA_SEED: u64 = 0;
pub const SHOTS: usize = 1;
pub const VAL_PER_CLASS: usize = 3;
pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

pub fn train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..TrainConfig::default()
    }
}

pub fn uncertainty_config(snpc: usize) -> UncertaintyConfig {
    UncertaintyConfig {
        snpc,
        ..UncertaintyConfig::default()
    }
}

pub fn mixup_config() -> MixupConfig {
    MixupConfig::default()
}

pub fn model_config() -> ModelConfig {
    ModelConfig::new(DIM, K)
}

pub struct SeedRun {
    pub seed: u64,
    pub pretrain: PretrainMetrics,
    pub pretrain_seconds: f64,
    pub methods: Vec<(Method, RunMetrics, f64)>,
    pub snpc: Vec<(usize, RunMetrics)>,
    pub classifier_bits_unchanged: bool,
}

fn bits(w: &[f64]) -> Vec<u64> {
    w.iter().map(|v| v.to_bits()).collect()
}

/// Pre-trains once for `seed`, then runs each method and each extra snpc
/// value of full UIDM from that checkpoint.
pub fn run_fixture_seed(seed: u64, methods: &[Method], snpc_values: &[usize]) -> SeedRun {
    let (source, target) = make_blobs_shift(K, N_PER_CLASS, DIM, SHIFT_SCALE, SPREAD, DATA_SEED).unwrap();
    let cfg = train_config(seed);
    let start = Instant::now();
    let (model, pretrain_metrics) = pretrain(&source, &model_config(), &cfg).unwrap();
    let pretrain_seconds = start.elapsed().as_secs_f64();
    let split = ssda_split(&target, SHOTS, VAL_PER_CLASS, seed).unwrap();
    let before = bits(model.classifier_weight().data());
    let mut unchanged = true;
    let mut run = |method: Method, snpc: usize| {
        let start = Instant::now();
        let (adapted, metrics) =
            run_method(method, model.clone(), &split, &uncertainty_config(snpc), &mixup_config(), &cfg).unwrap();
        unchanged &= bits(adapted.classifier_weight().data()) == before;
        (metrics, start.elapsed().as_secs_f64())
    };
    let default_snpc = UncertaintyConfig::default().snpc;
    let method_runs: Vec<(Method, RunMetrics, f64)> = methods
        .iter()
        .map(|&m| {
            let (metrics, secs) = run(m, default_snpc);
            (m, metrics, secs)
        })
        .collect();
    let snpc_runs: Vec<(usize, RunMetrics)> = snpc_values.iter().map(|&h| (h, run(Method::Uidm, h).0)).collect();
    SeedRun {
        seed,
        pretrain: pretrain_metrics,
        pretrain_seconds,
        methods: method_runs,
        snpc: snpc_runs,
        classifier_bits_unchanged: unchanged,
    }
}

pub const FIXTURE_METHODS: [Method; 6] = [
    Method::SourceOnly,
    Method::Uidm,
    Method::UidmWoSelection,
    Method::UidmWoHybrid,
    Method::UidmWoSelf,
    Method::UidmUnsup,
];

/// snpc values run in addition to the default; snpc 0 is covered by
/// `uidm_wo_selection` and snpc 5 by `uidm`.
pub const EXTRA_SNPC: [usize; 2] = [20, 30];

pub struct FixtureReport {
    pub seeds: Vec<SeedRun>,
    pub classifier_bits_unchanged: bool,
    pub uidm_seconds: f64,
    pub pseudo_rounds: usize,
    pub pseudo_violation: Option<String>,
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl FixtureReport {
    pub fn finals(&self, method: &str) -> Vec<f64> {
        self.seeds
            .iter()
            .map(|s| {
                s.methods
                    .iter()
                    .find(|(m, _, _)| m.as_str() == method)
                    .map(|(_, r, _)| r.final_accuracy())
                    .unwrap()
            })
            .collect()
    }

    pub fn median(&self, method: &str) -> f64 {
        median(self.finals(method))
    }

    pub fn snpc_median(&self, h: usize) -> f64 {
        match h {
            0 => self.median("uidm_wo_selection"),
            _ if h == UncertaintyConfig::default().snpc => self.median("uidm"),
            _ => median(
                self.seeds
                    .iter()
                    .map(|s| s.snpc.iter().find(|(v, _)| *v == h).unwrap().1.final_accuracy())
                    .collect(),
            ),
        }
    }

    pub fn describe(&self) -> String {
        format!(
            "K={K}, {N_PER_CLASS}/class, d={DIM}, shift={SHIFT_SCALE}, spread={SPREAD}, {SHOTS}-shot, seeds {:?}",
            self.seeds.iter().map(|s| s.seed).collect::<Vec<_>>()
        )
    }
}

pub fn run_fixture() -> FixtureReport {
    let seeds: Vec<SeedRun> = SEEDS.iter().map(|&s| run_fixture_seed(s, &FIXTURE_METHODS, &EXTRA_SNPC)).collect();
    let uidm_seconds = seeds
        .iter()
        .map(|s| s.pretrain_seconds + s.methods.iter().find(|(m, _, _)| *m == Method::Uidm).unwrap().2)
        .sum();
    let mut pseudo_rounds = 0;
    let mut pseudo_violation = None;
    for s in &seeds {
        let runs = s.methods.iter().map(|(m, r, _)| (m.to_string(), r)).chain(s.snpc.iter().map(|(h, r)| (format!("uidm snpc={h}"), r)));
        for (name, r) in runs {
            for round in &r.rounds {
                if let (Some(sel), Some(pool)) = (round.selected_pseudo_accuracy, round.pool_pseudo_accuracy) {
                    pseudo_rounds += 1;
                    if sel < pool && pseudo_violation.is_none() {
                        pseudo_violation = Some(format!(
                            "{name}, seed {}, round {}: selected {sel:.3} < pool {pool:.3}",
                            s.seed, round.round
                        ));
                    }
                }
            }
        }
    }
    FixtureReport {
        classifier_bits_unchanged: seeds.iter().all(|s| s.classifier_bits_unchanged),
        seeds,
        uidm_seconds,
        pseudo_rounds,
        pseudo_violation,
    }
}
