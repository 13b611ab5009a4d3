//! Ablation and sensitivity runs over one dataset.

use std::fmt::Write as _;

use crate::config::RunConfig;
use crate::data::{Dataset, Split};
use crate::error::Result;
use crate::evaluator::{evaluate, Metrics};
use crate::model::Model;
use crate::trainer::{EpochLog, Trainer};

/// The five ablation configurations derived from `base`, all sharing its seed.
pub fn ablation_variants(base: &RunConfig) -> Vec<(String, RunConfig)> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    vec![
        ("full".to_string(), base.clone()),
        ("w/o FgMAF".to_string(), with(&|c| c.model.enable_fgmaf = false)),
        (
            "w/o SaCL".to_string(),
            with(&|c| {
                c.train.sacl.enable_sv = false;
                c.train.sacl.enable_st = false;
            }),
        ),
        ("w/o L_ST".to_string(), with(&|c| c.train.sacl.enable_st = false)),
        ("w/o L_SV".to_string(), with(&|c| c.train.sacl.enable_sv = false)),
    ]
}

#[derive(Debug, Clone)]
pub struct ExperimentRow {
    pub label: String,
    pub config_hash: u64,
    pub seed: u64,
    pub best_valid_mrr: f64,
    pub metrics: Metrics,
    pub history: Vec<EpochLog>,
}

/// Trains `cfg` on `data`, restores the best-validation snapshot and
/// evaluates it (filtered) on `split`.
pub fn run_one(label: &str, cfg: &RunConfig, data: &Dataset, split: Split) -> Result<ExperimentRow> {
    cfg.validate()?;
    let store = &data.store;
    let (model, params) = Model::new(
        cfg.model.clone(),
        store.entity_count(),
        store.relation_count(),
        data.visual.as_ref(),
        data.textual.as_ref(),
        cfg.train.seed,
    )?;
    let mut trainer = Trainer::new(model, params, store, cfg.train.clone())?;
    let report = trainer.fit(None, None)?;
    trainer.restore_best()?;
    let metrics = evaluate(trainer.model(), trainer.params(), store, split, true)?.metrics;
    Ok(ExperimentRow {
        label: label.to_string(),
        config_hash: cfg.hash(),
        seed: cfg.train.seed,
        best_valid_mrr: report.best_valid_mrr,
        metrics,
        history: report.history,
    })
}

pub fn ablate(base: &RunConfig, data: &Dataset, split: Split) -> Result<Vec<ExperimentRow>> {
    ablation_variants(base)
        .iter()
        .map(|(label, cfg)| run_one(label, cfg, data, split))
        .collect()
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub tau: Vec<ExperimentRow>,
    pub k: Vec<ExperimentRow>,
}

/// Varies `sacl.tau` with `sacl.k` fixed at the base value, then `sacl.k`
/// with `sacl.tau` fixed.
pub fn sweep(base: &RunConfig, data: &Dataset, taus: &[f64], ks: &[usize], split: Split) -> Result<SweepReport> {
    let mut tau = Vec::with_capacity(taus.len());
    for &t in taus {
        let mut c = base.clone();
        c.train.sacl.tau = t;
        tau.push(run_one(&format!("tau={t}"), &c, data, split)?);
    }
    let mut k = Vec::with_capacity(ks.len());
    for &kk in ks {
        let mut c = base.clone();
        c.train.sacl.k = kk;
        k.push(run_one(&format!("K={kk}"), &c, data, split)?);
    }
    Ok(SweepReport { tau, k })
}

/// A plain-text table: one row per experiment, columns MRR and Hits@1/3/10.
pub fn table(title: &str, rows: &[ExperimentRow]) -> String {
    let mut s = format!("{title}\n");
    let _ = writeln!(s, "{:<12} {:>8} {:>8} {:>8} {:>8}", "setting", "MRR", "Hits@1", "Hits@3", "Hits@10");
    for r in rows {
        let m = &r.metrics.all;
        let _ = writeln!(
            s,
            "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            r.label, m.mrr, m.hits[0], m.hits[1], m.hits[2]
        );
    }
    s
}

/// Seed and config hash of every row, for provenance next to a table.
pub fn provenance(rows: &[ExperimentRow]) -> String {
    rows.iter()
        .map(|r| format!("{}\tseed={}\tconfig_hash={:016x}\tbest_valid_mrr={:.6}\n", r.label, r.seed, r.config_hash, r.best_valid_mrr))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_variants_share_seed() {
        let base = RunConfig::default();
        let v = ablation_variants(&base);
        assert_eq!(v.len(), 5);
        assert!(v.iter().all(|(_, c)| c.train.seed == base.train.seed));
        let no_sacl = &v[2].1.train.sacl;
        assert!(!no_sacl.enable_sv && !no_sacl.enable_st);
        assert!(!v[1].1.model.enable_fgmaf);
        assert!(v[3].1.train.sacl.enable_sv && !v[3].1.train.sacl.enable_st);
        assert!(!v[4].1.train.sacl.enable_sv && v[4].1.train.sacl.enable_st);
    }
}
