//! Losses and the training loop.
//!
//! Each batch re-encodes every entity from the current parameters, fuses the
//! views, decodes the batch queries against all entities, and adds the
//! contrastive alignment terms for the batch head entities. Training runs
//! over the train triples and their inverses, so one epoch asks each fact in
//! both directions once.

use std::io::Write;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tsam_autodiff::{AdamConfig, AdamState, ParamStore, Scalar, Tape, Var};

use crate::checkpoint::Checkpoint;
use crate::data::{batches, Split, Triple, TripleStore};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, Evaluation};
use crate::model::Model;
use crate::sacl::{sacl_loss, SaclConfig};

/// Probabilities are clamped to `[CLAMP, 1 − CLAMP]` before taking logs.
pub const CLAMP: f64 = 1e-7;

const SACL_STREAM: u64 = 0x5ac1_5ac1_5ac1_5ac1;
const SHUFFLE_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub seed: u64,
    pub sacl: SaclConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 100,
            batch_size: 128,
            label_smoothing: 0.0,
            seed: 42,
            sacl: SaclConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("train.batch_size must be ≥ 2, got {}", self.batch_size)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be ≥ 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be finite and ≥ 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "train.label_smoothing must be in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        self.sacl.validate()
    }
}

/// Binary cross-entropy of candidate probabilities `theta` against a one-hot
/// gold tail, averaged over candidates. With smoothing `eps` the targets are
/// `1 − eps` for the gold and `eps/(|E|−1)` elsewhere.
pub fn prediction_loss(theta: &[f64], gold: usize, eps: f64) -> Result<f64> {
    let n = theta.len();
    if gold >= n {
        return Err(Error::Data(format!("gold {gold} outside {n} candidates")));
    }
    if let Some((i, p)) = theta.iter().enumerate().find(|(_, p)| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Numeric(format!("probability {p} for candidate {i} is outside (0, 1)")));
    }
    let off = if n > 1 { eps / (n - 1) as f64 } else { 0.0 };
    let total: f64 = theta
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let p = p.clamp(CLAMP, 1.0 - CLAMP);
            let y = if i == gold { 1.0 - eps } else { off };
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / n as f64)
}

/// Unweighted sum of the enabled components.
pub fn total_loss(lp: f64, sv: Option<f64>, st: Option<f64>) -> f64 {
    let mut total = lp;
    if let Some(v) = sv {
        total += v;
    }
    if let Some(v) = st {
        total += v;
    }
    total
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub lp: Var,
    pub sv: Option<Var>,
    pub st: Option<Var>,
}

/// The training loss of one batch of (possibly inverse) triples.
///
/// The prediction term is written in logit form,
/// `softplus(s) − y·s = −[y·log σ(s) + (1−y)·log(1−σ(s))]`, averaged over
/// candidates and summed over the batch.
pub fn batch_loss<T: Scalar>(
    model: &Model,
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    batch: &[Triple],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossTerms> {
    let views = model.entity_views(tape, store, cfg.sacl.enabled())?;
    let heads: Vec<usize> = batch.iter().map(|t| t.head).collect();
    let rels: Vec<usize> = batch.iter().map(|t| t.relation).collect();
    let scores = model.score_queries(tape, store, views.e_f, &heads, &rels)?;

    let e = model.entity_count();
    let eps = cfg.label_smoothing;
    let off = if e > 1 { eps / (e - 1) as f64 } else { 0.0 };
    let mut y = vec![T::of(off); batch.len() * e];
    for (b, t) in batch.iter().enumerate() {
        y[b * e + t.tail] = T::of(1.0 - eps);
    }
    let y = tape.constant(batch.len(), e, y)?;
    let sp = tape.softplus(scores);
    let sp = tape.sum(sp);
    let sy = tape.mul(scores, y)?;
    let sy = tape.sum(sy);
    let lp = tape.sub(sp, sy)?;
    let lp = tape.scale(lp, 1.0 / e as f64);

    let mut total = lp;
    let (mut sv, mut st) = (None, None);
    if cfg.sacl.enabled() {
        let mut anchors = heads.clone();
        let mut seen = vec![false; e];
        anchors.retain(|&h| !std::mem::replace(&mut seen[h], true));
        let (vis, txt) = (
            views.e_vis.expect("views encoded for alignment"),
            views.e_txt.expect("views encoded for alignment"),
        );
        let s = tape.gather_rows(views.e_str, &anchors)?;
        let v = tape.gather_rows(vis, &anchors)?;
        let t = tape.gather_rows(txt, &anchors)?;
        let losses = sacl_loss(tape, s, v, t, &cfg.sacl, rng)?;
        for term in [losses.sv, losses.st].into_iter().flatten() {
            total = tape.add(total, term)?;
        }
        sv = losses.sv;
        st = losses.st;
    }
    Ok(LossTerms { total, lp, sv, st })
}

/// Batch-averaged loss components of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lp: f64,
    pub sv: f64,
    pub st: f64,
    pub total: f64,
    pub batches: usize,
    pub triples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub stats: EpochStats,
    pub valid_mrr: f64,
}

pub const LOG_HEADER: &str = "epoch\tL_p\tL_SV\tL_ST\tL\tvalid_mrr";

impl EpochLog {
    pub fn line(&self) -> String {
        let s = &self.stats;
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            s.epoch, s.lp, s.sv, s.st, s.total, self.valid_mrr
        )
    }
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_valid_mrr: f64,
}

/// Where [`Trainer::fit`] writes the best checkpoint.
#[derive(Debug, Clone)]
pub struct CheckpointTarget {
    pub path: PathBuf,
    pub config_text: String,
}

pub struct Trainer<'a> {
    model: Model,
    store: ParamStore,
    adam: AdamState,
    cfg: TrainConfig,
    data: &'a TripleStore,
    epoch: usize,
    sacl_rng: ChaCha8Rng,
    best: Option<Checkpoint>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: Model, store: ParamStore, data: &'a TripleStore, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if data.entity_count() != model.entity_count() || data.relation_count() != model.relation_count() {
            return Err(Error::Data(format!(
                "model built for {} entities / {} relations, data has {} / {}",
                model.entity_count(),
                model.relation_count(),
                data.entity_count(),
                data.relation_count()
            )));
        }
        let adam = AdamState::new(
            &store,
            AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
        );
        let sacl_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SACL_STREAM);
        Ok(Trainer {
            model,
            store,
            adam,
            cfg,
            data,
            epoch: 0,
            sacl_rng,
            best: None,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// The snapshot with the best validation MRR seen by [`Trainer::fit`].
    pub fn best(&self) -> Option<&Checkpoint> {
        self.best.as_ref()
    }

    pub fn into_parts(self) -> (Model, ParamStore) {
        (self.model, self.store)
    }

    /// One pass over the train triples and their inverses.
    pub fn run_epoch(&mut self) -> Result<EpochStats> {
        self.epoch += 1;
        let epoch = self.epoch;
        let triples = self.data.with_inverses(Split::Train);
        let shuffle = self.cfg.seed.wrapping_add((epoch as u64).wrapping_mul(SHUFFLE_STREAM));
        let plan = batches(&triples, self.cfg.batch_size, shuffle)?;
        let mut sums = [0.0f64; 4];
        let mut seen = 0;
        for (bi, batch) in plan.iter().enumerate() {
            let at = |e: Error| {
                if e.is_numeric() {
                    Error::Numeric(format!("epoch {epoch}, batch {}: {e}", bi + 1))
                } else {
                    e
                }
            };
            self.store.zero_grad();
            let mut tape = Tape::new();
            let terms = batch_loss(&self.model, &mut tape, &self.store, batch, &self.cfg, &mut self.sacl_rng)
                .map_err(at)?;
            let total = tape.item(terms.total) as f64;
            if !total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {total} at epoch {epoch}, batch {}",
                    bi + 1
                )));
            }
            tape.backward(terms.total, &mut self.store).map_err(|e| at(e.into()))?;
            self.adam.step(&mut self.store).map_err(|e| at(e.into()))?;
            let val = |v: Option<Var>| v.map_or(0.0, |v| tape.item(v) as f64);
            sums[0] += tape.item(terms.lp) as f64;
            sums[1] += val(terms.sv);
            sums[2] += val(terms.st);
            sums[3] += total;
            seen += batch.len();
        }
        let n = plan.len() as f64;
        Ok(EpochStats {
            epoch,
            lp: sums[0] / n,
            sv: sums[1] / n,
            st: sums[2] / n,
            total: sums[3] / n,
            batches: plan.len(),
            triples: seen,
        })
    }

    pub fn evaluate(&self, split: Split, filtered: bool) -> Result<Evaluation> {
        evaluate(&self.model, &self.store, self.data, split, filtered)
    }

    /// Runs the configured number of epochs, evaluating on the valid split
    /// (filtered) after each one and keeping the best snapshot. When a
    /// target is given the best snapshot is also written to disk; when a log
    /// is given one tab-separated line per epoch is appended to it.
    pub fn fit(&mut self, target: Option<&CheckpointTarget>, mut log: Option<&mut dyn Write>) -> Result<FitReport> {
        let io = |e: std::io::Error| Error::Data(format!("writing training log: {e}"));
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{LOG_HEADER}").map_err(io)?;
        }
        let mut history = Vec::with_capacity(self.cfg.epochs);
        for _ in 0..self.cfg.epochs {
            let stats = self.run_epoch()?;
            let valid_mrr = self.evaluate(Split::Valid, true)?.metrics.mrr();
            let entry = EpochLog { stats, valid_mrr };
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", entry.line()).map_err(io)?;
            }
            history.push(entry);
            let improved = self.best.as_ref().map_or(true, |b| valid_mrr > b.best_valid_mrr);
            if improved {
                let ck = Checkpoint {
                    epoch: stats.epoch as u32,
                    config_text: target.map(|t| t.config_text.clone()).unwrap_or_default(),
                    best_valid_mrr: valid_mrr,
                    params: self.store.clone(),
                    adam: self.adam.clone(),
                };
                if let Some(t) = target {
                    ck.save(&t.path)?;
                }
                self.best = Some(ck);
            }
        }
        let best = self.best.as_ref().expect("at least one epoch ran");
        Ok(FitReport {
            history,
            best_epoch: best.epoch as usize,
            best_valid_mrr: best.best_valid_mrr,
        })
    }

    /// Replaces the current parameters and optimizer state with the best
    /// snapshot.
    pub fn restore_best(&mut self) -> Result<()> {
        let best = self
            .best
            .as_ref()
            .ok_or_else(|| Error::Data("no snapshot to restore; call fit first".into()))?;
        best.restore_into(&mut self.store)?;
        self.adam = best.adam.clone();
        Ok(())
    }
}
