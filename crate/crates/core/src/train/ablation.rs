use std::fmt::Write as _;

use crate::error::Result;
use crate::model::Model;
use crate::synth::Benchmark;
use crate::train::config::{Mode, TrainConfig};
use crate::train::trainer::Trainer;

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub mode: Mode,
    /// Final mean target-domain mIoU, one per seed.
    pub per_seed: Vec<f64>,
    pub trainable_now: usize,
    pub trainable_cumulative: usize,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        self.per_seed.iter().sum::<f64>() / self.per_seed.len() as f64
    }

    /// Sample standard deviation (n − 1); zero for a single seed.
    pub fn std(&self) -> f64 {
        let n = self.per_seed.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        (self.per_seed.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64).sqrt()
    }
}

/// Runs every `(mode, seed)` pair from the same pretrained `base`.
pub fn run_ablation(cfg: &TrainConfig, bench: &Benchmark, base: &Model, modes: &[Mode], seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(modes.len());
    for &mode in modes {
        let mut row = AblationRow {
            mode,
            per_seed: Vec::with_capacity(seeds.len()),
            trainable_now: 0,
            trainable_cumulative: 0,
        };
        for &seed in seeds {
            let mut run_cfg = cfg.clone();
            run_cfg.mode = mode;
            run_cfg.seed = seed;
            let mut trainer = Trainer::new(run_cfg, base)?;
            trainer.run(bench)?;
            let miou = trainer.final_target_miou().unwrap_or(0.0);
            log::info!("{mode} seed {seed}: target mIoU {miou:.4}");
            row.per_seed.push(miou);
            row.trainable_now = row.trainable_now.max(trainer.trainable_now());
            row.trainable_cumulative = row.trainable_cumulative.max(trainer.trainable_cumulative());
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn format_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<18} {:>10} {:>10} {:>12} {:>12}",
        "mode", "miou_mean", "miou_std", "trainable", "cumulative"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<18} {:>10.4} {:>10.4} {:>12} {:>12}",
            r.mode.as_str(),
            r.mean(),
            r.std(),
            r.trainable_now,
            r.trainable_cumulative
        );
    }
    out
}
