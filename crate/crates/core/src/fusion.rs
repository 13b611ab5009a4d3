//! Attention-weighted fusion of the structural, visual and textual views.
//!
//! A single learned vector `α` scores each view (`αᵀe`), a softmax over the
//! three scores gives the view weights, and the fused entity is the weighted
//! sum of the views. The concat variant feeds the weighted views through a
//! `3d → d` linear map instead.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use tsam_autodiff::{ParamId, ParamStore, Scalar, Tape, Var};

use crate::error::{Error, Result};
use crate::init;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionKind {
    Sum,
    Concat,
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionKind::Sum => "sum",
            FusionKind::Concat => "concat",
        })
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(FusionKind::Sum),
            "concat" => Ok(FusionKind::Concat),
            other => Err(Error::Config(format!("unknown fusion {other:?} (expected sum or concat)"))),
        }
    }
}

/// `(α_s, α_v, α_t)`, each paired with its own view.
pub fn attention_weights<T: Scalar>(e_str: &[T], e_vis: &[T], e_txt: &[T], alpha: &[T]) -> [T; 3] {
    let logit = |e: &[T]| e.iter().zip(alpha).map(|(&a, &b)| a * b).sum::<T>();
    let z = [logit(e_str), logit(e_vis), logit(e_txt)];
    let m = z[0].max(z[1]).max(z[2]);
    let ex = z.map(|v| (v - m).exp());
    let total = ex[0] + ex[1] + ex[2];
    ex.map(|v| v / total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedEntity<T> {
    pub e_f: Vec<T>,
    pub weights: [T; 3],
}

pub fn fuse<T: Scalar>(e_str: &[T], e_vis: &[T], e_txt: &[T], weights: [T; 3]) -> FusedEntity<T> {
    let e_f = e_str
        .iter()
        .zip(e_vis)
        .zip(e_txt)
        .map(|((&s, &v), &t)| weights[0] * s + weights[1] * v + weights[2] * t)
        .collect();
    FusedEntity { e_f, weights }
}

#[derive(Debug, Clone)]
pub struct Fusion {
    kind: FusionKind,
    alpha: ParamId,
    mix: Option<(ParamId, ParamId)>,
}

impl Fusion {
    pub fn new(store: &mut ParamStore, kind: FusionKind, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let alpha = store.add("fusion.alpha", init::normal(rng, 1, dim, 0.1));
        let mix = (kind == FusionKind::Concat).then(|| {
            (
                store.add("fusion.mix.weight", init::xavier(rng, 3 * dim, dim)),
                store.add("fusion.mix.bias", init::constant(1, dim, 0.0)),
            )
        });
        Fusion { kind, alpha, mix }
    }

    pub fn kind(&self) -> FusionKind {
        self.kind
    }

    pub fn alpha_id(&self) -> ParamId {
        self.alpha
    }

    /// Fuses `N×d` view matrices row by row, returning `(e_f, weights)` with
    /// weights `N×3` in `(structural, visual, textual)` order.
    pub fn fuse_all<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        e_str: Var,
        e_vis: Var,
        e_txt: Var,
    ) -> Result<(Var, Var)> {
        let alpha = tape.param(store, self.alpha);
        let at = tape.transpose(alpha);
        let mut logits = Vec::with_capacity(3);
        for e in [e_str, e_vis, e_txt] {
            logits.push(tape.matmul(e, at)?);
        }
        let logits = tape.concat_cols(&logits)?;
        let w = tape.softmax(logits)?;
        let mut parts = Vec::with_capacity(3);
        for (i, e) in [e_str, e_vis, e_txt].into_iter().enumerate() {
            let wi = tape.slice_cols(w, i, 1)?;
            parts.push(tape.mul(e, wi)?);
        }
        let e_f = match self.mix {
            None => {
                let sv = tape.add(parts[0], parts[1])?;
                tape.add(sv, parts[2])?
            }
            Some((mw, mb)) => {
                let x = tape.concat_cols(&parts)?;
                let (mw, mb) = (tape.param(store, mw), tape.param(store, mb));
                let y = tape.matmul(x, mw)?;
                tape.add(y, mb)?
            }
        };
        Ok((e_f, w))
    }
}
