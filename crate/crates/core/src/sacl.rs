//! In-batch contrastive alignment of the visual and textual views to the
//! structural view.
//!
//! For a batch of `B` entities with view matrices `S`, `V`, `T`, each
//! direction (S→V, V→S, S→T, T→S) is an InfoNCE loss over cosine
//! similarities: the positive is the same entity in the other view, the `K`
//! negatives are other batch entities in the other view.

use rand::seq::index;
use rand_chacha::ChaCha8Rng;
use tsam_autodiff::{Scalar, Tape, Var};

use crate::error::{Error, Result};

pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaclConfig {
    pub tau: f64,
    pub k: usize,
    pub enable_sv: bool,
    pub enable_st: bool,
}

impl Default for SaclConfig {
    fn default() -> Self {
        SaclConfig {
            tau: 0.02,
            k: 16,
            enable_sv: true,
            enable_st: true,
        }
    }
}

impl SaclConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("sacl.tau must be positive, got {}", self.tau)));
        }
        if self.k == 0 {
            return Err(Error::Config("sacl.k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn enabled(&self) -> bool {
        self.enable_sv || self.enable_st
    }
}

/// For each row `i` of a batch of `b`, `k` distinct indices drawn uniformly
/// from `{0..b} \ {i}`.
pub fn sample_negatives(b: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    if b == 0 || k + 1 > b {
        return Err(Error::Config(format!(
            "cannot draw {k} negatives from a batch of {b} (need k ≤ batch − 1)"
        )));
    }
    Ok((0..b)
        .map(|i| {
            index::sample(rng, b - 1, k)
                .into_iter()
                .map(|j| if j >= i { j + 1 } else { j })
                .collect()
        })
        .collect())
}

/// InfoNCE over cosine similarity on the tape. `negatives[i]` indexes rows of
/// `positives`.
pub fn info_nce<T: Scalar>(
    tape: &mut Tape<T>,
    anchors: Var,
    positives: Var,
    negatives: &[Vec<usize>],
    tau: f64,
) -> Result<Var> {
    let (b, d) = tape.dims(anchors);
    if tape.dims(positives) != (b, d) || negatives.len() != b {
        return Err(Error::Data(format!(
            "info_nce: anchors {b}×{d}, positives {:?}, {} negative rows",
            tape.dims(positives),
            negatives.len()
        )));
    }
    let k = negatives.first().map_or(0, Vec::len);
    if k == 0 || negatives.iter().any(|n| n.len() != k || n.iter().any(|&j| j >= b)) {
        return Err(Error::Data("info_nce: ragged or out-of-range negative indices".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let a = tape.l2_normalize_rows(anchors, COSINE_EPS)?;
    let p = tape.l2_normalize_rows(positives, COSINE_EPS)?;
    let ap = tape.mul(a, p)?;
    let pos = tape.row_sums(ap);

    let rep: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat(i).take(k)).collect();
    let flat: Vec<usize> = negatives.iter().flatten().copied().collect();
    let ar = tape.gather_rows(a, &rep)?;
    let nr = tape.gather_rows(p, &flat)?;
    let an = tape.mul(ar, nr)?;
    let neg = tape.row_sums(an);
    let neg = tape.reshape(neg, b, k)?;

    let logits = tape.concat_cols(&[pos, neg])?;
    let logits = tape.scale(logits, 1.0 / tau);
    let lse = tape.logsumexp(logits)?;
    let first = tape.slice_cols(logits, 0, 1)?;
    let per_row = tape.sub(lse, first)?;
    Ok(tape.mean(per_row))
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot / (na.max(COSINE_EPS) * nb.max(COSINE_EPS)))
}

/// InfoNCE on explicit vectors: `negatives[i][j]` is the `j`-th negative of
/// anchor `i`.
pub fn info_nce_dense(
    anchors: &[Vec<f64>],
    positives: &[Vec<f64>],
    negatives: &[Vec<Vec<f64>>],
    tau: f64,
) -> Result<f64> {
    if anchors.is_empty() || anchors.len() != positives.len() || anchors.len() != negatives.len() {
        return Err(Error::Data("info_nce: mismatched batch sizes".into()));
    }
    let mut total = 0.0;
    for ((a, p), negs) in anchors.iter().zip(positives).zip(negatives) {
        let mut logits = vec![cosine(a, p)? / tau];
        for n in negs {
            logits.push(cosine(a, n)? / tau);
        }
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        total += lse - logits[0];
    }
    Ok(total / anchors.len() as f64)
}

/// The two aligned-pair losses; `None` for a disabled term.
#[derive(Debug, Clone, Copy)]
pub struct SaclLosses {
    pub sv: Option<Var>,
    pub st: Option<Var>,
}

/// `L_SV = L_{S→V} + L_{V→S}` and `L_ST = L_{S→T} + L_{T→S}`, each direction
/// with its own negative draw. `k` is clamped to `B − 1`; a batch of fewer
/// than two entities yields no terms.
pub fn sacl_loss<T: Scalar>(
    tape: &mut Tape<T>,
    s: Var,
    v: Var,
    t: Var,
    cfg: &SaclConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SaclLosses> {
    cfg.validate()?;
    let b = tape.dims(s).0;
    if b < 2 {
        return Ok(SaclLosses { sv: None, st: None });
    }
    let k = cfg.k.min(b - 1);
    let mut pair = |tape: &mut Tape<T>, other: Var| -> Result<Var> {
        let n1 = sample_negatives(b, k, rng)?;
        let n2 = sample_negatives(b, k, rng)?;
        let forward = info_nce(tape, s, other, &n1, cfg.tau)?;
        let backward = info_nce(tape, other, s, &n2, cfg.tau)?;
        Ok(tape.add(forward, backward)?)
    };
    let sv = if cfg.enable_sv { Some(pair(tape, v)?) } else { None };
    let st = if cfg.enable_st { Some(pair(tape, t)?) } else { None };
    Ok(SaclLosses { sv, st })
}
