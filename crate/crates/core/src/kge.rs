//! Structural embeddings and the TuckER, TransE and RotatE scoring functions.
//!
//! Plausibility is "higher is better" everywhere: TuckER scores are used as
//! they are, TransE and RotatE distances are negated.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use tsam_autodiff::{ParamId, ParamStore, Scalar, Tape, Var};

use crate::error::{Error, Result};
use crate::init;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScoreFn {
    Tucker,
    TransE,
    RotatE,
}

impl ScoreFn {
    pub const ALL: [ScoreFn; 3] = [ScoreFn::Tucker, ScoreFn::TransE, ScoreFn::RotatE];

    pub fn name(self) -> &'static str {
        match self {
            ScoreFn::Tucker => "tucker",
            ScoreFn::TransE => "transe",
            ScoreFn::RotatE => "rotate",
        }
    }
}

impl fmt::Display for ScoreFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScoreFn::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| {
                Error::Config(format!("unknown score_fn {s:?} (expected tucker, transe or rotate)"))
            })
    }
}

/// Handles to the structural parameters in a [`ParamStore`].
///
/// RotatE entities are `d/2` complex numbers stored as `[re…, im…]`, and
/// RotatE relations are `d/2` phases, so every rotation has unit modulus.
/// Relation rows `r + relation_count` are the inverse relations.
#[derive(Debug, Clone)]
pub struct KgeParams {
    pub score_fn: ScoreFn,
    pub dim: usize,
    pub entity_count: usize,
    pub relation_count: usize,
    pub entity: ParamId,
    pub relation: ParamId,
    pub core: Option<ParamId>,
}

pub fn init_embeddings(
    store: &mut ParamStore,
    entity_count: usize,
    relation_count: usize,
    dim: usize,
    score_fn: ScoreFn,
    rng: &mut ChaCha8Rng,
) -> Result<KgeParams> {
    if entity_count == 0 || relation_count == 0 || dim == 0 {
        return Err(Error::Config(format!(
            "embedding sizes must be positive: {entity_count} entities, {relation_count} relations, dim {dim}"
        )));
    }
    if score_fn == ScoreFn::RotatE && dim % 2 != 0 {
        return Err(Error::Config(format!("rotate needs an even dim, got {dim}")));
    }
    let rows = 2 * relation_count;
    let entity = store.add("kge.entity", init::xavier(rng, entity_count, dim));
    let relation = match score_fn {
        ScoreFn::RotatE => store.add("kge.relation", init::uniform(rng, rows, dim / 2, 0.0, TAU)),
        _ => store.add("kge.relation", init::xavier(rng, rows, dim)),
    };
    let core = (score_fn == ScoreFn::Tucker)
        .then(|| store.add("kge.core", init::normal(rng, dim, dim * dim, 0.1)));
    Ok(KgeParams {
        score_fn,
        dim,
        entity_count,
        relation_count,
        entity,
        relation,
        core,
    })
}

impl KgeParams {
    /// Width of one relation row (`d`, or `d/2` phases for RotatE).
    pub fn relation_width(&self) -> usize {
        match self.score_fn {
            ScoreFn::RotatE => self.dim / 2,
            _ => self.dim,
        }
    }

    /// Relation rows for `ids` as they enter the scoring function.
    pub fn relations<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        ids: &[usize],
    ) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&r| r >= 2 * self.relation_count) {
            return Err(Error::Data(format!("relation id {bad} out of range")));
        }
        let all = tape.param(store, self.relation);
        Ok(tape.gather_rows(all, ids)?)
    }

    /// A `d`-wide relation vector for the decoder: the row itself, or
    /// `[cos θ, sin θ]` for RotatE phases.
    pub fn relation_input<T: Scalar>(&self, tape: &mut Tape<T>, rel: Var) -> Result<Var> {
        Ok(match self.score_fn {
            ScoreFn::RotatE => {
                let c = tape.cos(rel);
                let s = tape.sin(rel);
                tape.concat_cols(&[c, s])?
            }
            _ => rel,
        })
    }

    /// `B×E` plausibility of `(heads[b], rels[b], candidates[e])`.
    pub fn plausibility<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        heads: Var,
        rels: Var,
        candidates: Var,
    ) -> Result<Var> {
        Ok(match self.score_fn {
            ScoreFn::Tucker => {
                let core = self
                    .core
                    .ok_or_else(|| Error::Config("tucker scoring without a core tensor".into()))?;
                let w = tape.param(store, core);
                let hw = tape.matmul(heads, w)?;
                let q = tape.tucker_contract(hw, rels)?;
                let ct = tape.transpose(candidates);
                tape.matmul(q, ct)?
            }
            ScoreFn::TransE => {
                let q = tape.add(heads, rels)?;
                let d = tape.pairwise_l2(q, candidates)?;
                tape.scale(d, -1.0)
            }
            ScoreFn::RotatE => {
                let half = self.dim / 2;
                let re = tape.slice_cols(heads, 0, half)?;
                let im = tape.slice_cols(heads, half, half)?;
                let (c, s) = (tape.cos(rels), tape.sin(rels));
                let (rc, is) = (tape.mul(re, c)?, tape.mul(im, s)?);
                let (rs, ic) = (tape.mul(re, s)?, tape.mul(im, c)?);
                let out_re = tape.sub(rc, is)?;
                let out_im = tape.add(rs, ic)?;
                let q = tape.concat_cols(&[out_re, out_im])?;
                let d = tape.pairwise_complex_l1(q, candidates)?;
                tape.scale(d, -1.0)
            }
        })
    }
}

/// `Σ_{i,j,k} W_ijk h_i r_j t_k` for every candidate row, with `core` laid out
/// as `core[i·d² + j·d + k]`.
pub fn score_tucker<T: Scalar>(h: &[T], r: &[T], core: &[T], candidates: &[T]) -> Result<Vec<T>> {
    let d = h.len();
    if r.len() != d || core.len() != d * d * d || candidates.len() % d.max(1) != 0 {
        return Err(Error::Data(format!(
            "tucker shapes: h {d}, r {}, core {}, candidates {}",
            r.len(),
            core.len(),
            candidates.len()
        )));
    }
    let mut q = vec![T::zero(); d];
    for (i, &hi) in h.iter().enumerate() {
        for (j, &rj) in r.iter().enumerate() {
            let w = &core[i * d * d + j * d..i * d * d + (j + 1) * d];
            for (qk, &wk) in q.iter_mut().zip(w) {
                *qk = *qk + hi * rj * wk;
            }
        }
    }
    Ok(candidates
        .chunks_exact(d)
        .map(|t| q.iter().zip(t).map(|(&a, &b)| a * b).sum())
        .collect())
}

/// `‖h + r − t‖₂`.
pub fn score_transe<T: Scalar>(h: &[T], r: &[T], t: &[T]) -> Result<T> {
    if h.len() != r.len() || h.len() != t.len() {
        return Err(Error::Data("transe vectors differ in length".into()));
    }
    Ok(h.iter()
        .zip(r)
        .zip(t)
        .map(|((&h, &r), &t)| (h + r - t) * (h + r - t))
        .sum::<T>()
        .sqrt())
}

/// `Σ_k |h_k · e^{iθ_k} − t_k|` with complex `h`, `t` stored as `[re…, im…]`.
pub fn score_rotate<T: Scalar>(h: &[T], theta: &[T], t: &[T]) -> Result<T> {
    let half = theta.len();
    if h.len() != 2 * half || t.len() != 2 * half {
        return Err(Error::Data("rotate vectors need 2·len(θ) components".into()));
    }
    Ok((0..half)
        .map(|k| {
            let (c, s) = (theta[k].cos(), theta[k].sin());
            let re = h[k] * c - h[half + k] * s - t[k];
            let im = h[k] * s + h[half + k] * c - t[half + k];
            (re * re + im * im).sqrt()
        })
        .sum())
}
