//! Desk-scale experiments shared by the examples and the acceptance suite:
//! memorising a handful of pairs, and the global-branch ablation scored by
//! region recall per change size.

use std::io::Write;
use std::time::Instant;

use crate::config::RunConfig;
use crate::data::synth::{generate, Split};
use crate::data::{ChangeSample, SizeClass};
use crate::network::{Mctnet, NetworkConfig};
use crate::training::{evaluate, train, EpochRecord, Evaluation, TrainOptions};
use crate::Result;

fn split_of(cfg: &RunConfig, all: &[ChangeSample], split: Split) -> Vec<ChangeSample> {
    all[cfg.synth.splits.range(split)].to_vec()
}

#[derive(Clone, Debug)]
pub struct OverfitReport {
    pub records: Vec<EpochRecord>,
    /// Eval-mode scores of the best parameters on the training pairs.
    pub train: Evaluation,
    pub seconds: f64,
}

/// Trains on the training split and validates on the same pairs, stopping
/// at `cfg.train.target_f1` if set.
pub fn overfit(cfg: &RunConfig, log: Option<&mut dyn Write>) -> Result<OverfitReport> {
    let start = Instant::now();
    let all = generate(&cfg.synth, cfg.seed)?;
    let pairs = split_of(cfg, &all, Split::Train);
    let (model, mut store) = Mctnet::build(cfg.network.clone(), cfg.seed)?;
    let opts = TrainOptions {
        target_f1: cfg.train.target_f1,
        log,
    };
    let optim = cfg.optim_config();
    let report = train(&model, &mut store, &pairs, &pairs, &optim, opts)?;
    let scores = evaluate(&model, &report.best, &pairs, optim.batch_size)?;
    Ok(OverfitReport {
        records: report.records,
        train: scores,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug)]
pub struct AblationArm {
    pub network: NetworkConfig,
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Scores of the best-validation parameters on the test split.
    pub test: Evaluation,
    pub seconds: f64,
}

impl AblationArm {
    pub fn region_recall(&self, class: SizeClass) -> f64 {
        self.test.by_size.get(&class).map_or(0.0, |r| r.recall())
    }
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub full: AblationArm,
    pub local_only: AblationArm,
}

impl AblationReport {
    /// Region recall of the full network minus that of the local-only one.
    pub fn margin(&self, class: SizeClass) -> f64 {
        self.full.region_recall(class) - self.local_only.region_recall(class)
    }
}

/// Trains `cfg.network` and the same network without its global branch on
/// one generated dataset, with identical seeds and budgets.
pub fn global_branch_ablation(cfg: &RunConfig, mut log: Option<&mut dyn Write>) -> Result<AblationReport> {
    let all = generate(&cfg.synth, cfg.seed)?;
    let (tr, val, test) = (
        split_of(cfg, &all, Split::Train),
        split_of(cfg, &all, Split::Val),
        split_of(cfg, &all, Split::Test),
    );
    let optim = cfg.optim_config();
    let mut run = |global_branch: bool| -> Result<AblationArm> {
        let start = Instant::now();
        let network = NetworkConfig {
            global_branch,
            ..cfg.network.clone()
        };
        let (model, mut store) = Mctnet::build(network.clone(), cfg.seed)?;
        if let Some(w) = log.as_mut() {
            let _ = writeln!(w, "arm global_branch={global_branch}");
        }
        let opts = TrainOptions {
            target_f1: None,
            log: log.as_mut().map(|w| &mut **w as &mut dyn Write),
        };
        let report = train(&model, &mut store, &tr, &val, &optim, opts)?;
        let scores = evaluate(&model, &report.best, &test, optim.batch_size)?;
        Ok(AblationArm {
            network,
            records: report.records,
            best_epoch: report.best_epoch,
            test: scores,
            seconds: start.elapsed().as_secs_f64(),
        })
    };
    let full = run(true)?;
    let local_only = run(false)?;
    Ok(AblationReport { full, local_only })
}
