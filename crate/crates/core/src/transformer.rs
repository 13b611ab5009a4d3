//! Post-norm transformer stack over packed, segmented sequences.

use rand_chacha::ChaCha8Rng;
use tsam_autodiff::{ParamId, ParamStore, Scalar, Segment, Tape, Var};

use crate::error::{Error, Result};
use crate::init;

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ffn_dim: usize,
}

impl TransformerConfig {
    pub fn validate(&self, what: &str) -> Result<()> {
        if self.dim < 2 || self.heads == 0 || self.ffn_dim == 0 {
            return Err(Error::Config(format!(
                "{what}: dim ≥ 2, heads ≥ 1 and ffn_dim ≥ 1 required, got {self:?}"
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "{what}: dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct Transformer {
    cfg: TransformerConfig,
    blocks: Vec<Block>,
}

impl Transformer {
    pub(crate) fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: TransformerConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate(prefix)?;
        let (d, f) = (cfg.dim, cfg.ffn_dim);
        let blocks = (0..cfg.layers)
            .map(|i| {
                let mut add = |name: &str, t| store.add(format!("{prefix}.layer{i}.{name}"), t);
                Block {
                    wq: add("attn.wq", init::xavier(rng, d, d)),
                    bq: add("attn.bq", init::constant(1, d, 0.0)),
                    wk: add("attn.wk", init::xavier(rng, d, d)),
                    bk: add("attn.bk", init::constant(1, d, 0.0)),
                    wv: add("attn.wv", init::xavier(rng, d, d)),
                    bv: add("attn.bv", init::constant(1, d, 0.0)),
                    wo: add("attn.wo", init::xavier(rng, d, d)),
                    bo: add("attn.bo", init::constant(1, d, 0.0)),
                    ln1_gain: add("ln1.gain", init::constant(1, d, 1.0)),
                    ln1_bias: add("ln1.bias", init::constant(1, d, 0.0)),
                    w1: add("ffn.w1", init::xavier(rng, d, f)),
                    b1: add("ffn.b1", init::constant(1, f, 0.0)),
                    w2: add("ffn.w2", init::xavier(rng, f, d)),
                    b2: add("ffn.b2", init::constant(1, d, 0.0)),
                    ln2_gain: add("ln2.gain", init::constant(1, d, 1.0)),
                    ln2_bias: add("ln2.bias", init::constant(1, d, 0.0)),
                }
            })
            .collect();
        Ok(Transformer { cfg, blocks })
    }

    pub(crate) fn config(&self) -> TransformerConfig {
        self.cfg
    }

    /// Runs every block over packed rows `x` (`N×d`); attention never crosses
    /// segment boundaries.
    pub(crate) fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        mut x: Var,
        segments: &[Segment],
    ) -> Result<Var> {
        for b in &self.blocks {
            let linear = |tape: &mut Tape<T>, x: Var, w: ParamId, bias: ParamId| -> Result<Var> {
                let w = tape.param(store, w);
                let bias = tape.param(store, bias);
                let y = tape.matmul(x, w)?;
                Ok(tape.add(y, bias)?)
            };
            let q = linear(tape, x, b.wq, b.bq)?;
            let k = linear(tape, x, b.wk, b.bk)?;
            let v = linear(tape, x, b.wv, b.bv)?;
            let a = tape.segment_attention(q, k, v, segments, self.cfg.heads)?;
            let o = linear(tape, a, b.wo, b.bo)?;
            let res = tape.add(x, o)?;
            let (g1, b1) = (tape.param(store, b.ln1_gain), tape.param(store, b.ln1_bias));
            x = tape.layer_norm(res, g1, b1, LN_EPS)?;

            let h = linear(tape, x, b.w1, b.b1)?;
            let h = tape.gelu(h);
            let f = linear(tape, h, b.w2, b.b2)?;
            let res = tape.add(x, f)?;
            let (g2, b2) = (tape.param(store, b.ln2_gain), tape.param(store, b.ln2_bias));
            x = tape.layer_norm(res, g2, b2, LN_EPS)?;
        }
        Ok(x)
    }
}
