//! Token projection and sequence encoding for the visual and textual views.
//!
//! Both modalities share one transformer and one `[ENT]` summary token; each
//! modality has its own linear projection into the model space and its own
//! learned placeholder token, used when an entity has no tokens at all.

use rand_chacha::ChaCha8Rng;
use tsam_autodiff::{ParamId, ParamStore, Scalar, Segment, Tape, Var};

use crate::data::{Modality, TokenBank};
use crate::error::{Error, Result};
use crate::init;
use crate::transformer::{Transformer, TransformerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    /// Hidden state at the `[ENT]` position.
    Ent,
    /// Mean over every position, `[ENT]` included.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub transformer: TransformerConfig,
    pub pooling: Pooling,
    pub text_positions: bool,
    pub visual_positions: bool,
    pub max_tokens: usize,
}

impl EncoderConfig {
    fn positions(&self, m: Modality) -> bool {
        match m {
            Modality::Visual => self.visual_positions,
            Modality::Textual => self.text_positions,
        }
    }
}

/// One modality's tokens for every entity, truncated and flattened so a
/// whole bank can enter the tape as a single constant.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedTokens {
    pub modality: Modality,
    pub dim: usize,
    data: Vec<f32>,
    spans: Vec<Option<(usize, usize)>>,
}

impl PackedTokens {
    /// Packs `bank` for entities `0..entity_count`, keeping at most
    /// `max_tokens` tokens per entity. A missing bank marks every entity as
    /// missing, with `fallback_dim` as the (unused) token width.
    pub fn new(
        bank: Option<&TokenBank>,
        modality: Modality,
        entity_count: usize,
        max_tokens: usize,
        fallback_dim: usize,
    ) -> Result<Self> {
        if let Some(b) = bank {
            if b.modality() != modality {
                return Err(Error::Data(format!(
                    "expected a {modality} bank, got {}",
                    b.modality()
                )));
            }
        }
        let dim = bank.map_or(fallback_dim, TokenBank::dim);
        let mut data = Vec::new();
        let mut spans = Vec::with_capacity(entity_count);
        for e in 0..entity_count {
            let span = bank.and_then(|b| b.tokens(e)).and_then(|t| {
                let count = (t.len() / dim).min(max_tokens);
                (count > 0).then(|| {
                    let start = data.len() / dim;
                    data.extend_from_slice(&t[..count * dim]);
                    (start, count)
                })
            });
            spans.push(span);
        }
        Ok(PackedTokens {
            modality,
            dim,
            data,
            spans,
        })
    }

    pub fn entity_count(&self) -> usize {
        self.spans.len()
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    /// `(first row, token count)` of an entity's tokens, `None` if missing.
    pub fn span(&self, entity: usize) -> Option<(usize, usize)> {
        self.spans[entity]
    }

    /// Number of token rows the encoder will see for `entity` (1 for the
    /// placeholder).
    pub fn sequence_len(&self, entity: usize) -> usize {
        self.spans[entity].map_or(1, |(_, n)| n)
    }
}

#[derive(Debug, Clone)]
struct Projection {
    weight: ParamId,
    bias: ParamId,
    placeholder: ParamId,
    token_dim: usize,
}

#[derive(Debug, Clone)]
pub struct ModalityEncoder {
    cfg: EncoderConfig,
    visual: Projection,
    textual: Projection,
    ent_token: ParamId,
    positions: ParamId,
    transformer: Transformer,
}

impl ModalityEncoder {
    pub fn new(
        store: &mut ParamStore,
        cfg: EncoderConfig,
        visual_dim: usize,
        textual_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if cfg.max_tokens == 0 {
            return Err(Error::Config("max_tokens must be positive".into()));
        }
        let d = cfg.transformer.dim;
        let mut projection = |name: &str, token_dim: usize| Projection {
            weight: store.add(format!("encoder.proj_{name}.weight"), init::xavier(rng, token_dim, d)),
            bias: store.add(format!("encoder.proj_{name}.bias"), init::constant(1, d, 0.0)),
            placeholder: store.add(
                format!("encoder.placeholder_{name}"),
                init::normal(rng, 1, token_dim, 1.0),
            ),
            token_dim,
        };
        let visual = projection("visual", visual_dim);
        let textual = projection("textual", textual_dim);
        let ent_token = store.add("encoder.ent_token", init::normal(rng, 1, d, 1.0));
        let positions = store.add(
            "encoder.positions",
            init::normal(rng, cfg.max_tokens, d, 0.1),
        );
        let transformer = Transformer::new(store, "encoder", cfg.transformer, rng)?;
        Ok(ModalityEncoder {
            cfg,
            visual,
            textual,
            ent_token,
            positions,
            transformer,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.transformer.config().dim
    }

    fn projection(&self, m: Modality) -> &Projection {
        match m {
            Modality::Visual => &self.visual,
            Modality::Textual => &self.textual,
        }
    }

    pub fn token_dim(&self, m: Modality) -> usize {
        self.projection(m).token_dim
    }

    pub fn ent_token_id(&self) -> ParamId {
        self.ent_token
    }

    pub fn placeholder_id(&self, m: Modality) -> ParamId {
        self.projection(m).placeholder
    }

    /// `tokens·W + b` for an `n×token_dim` block of raw tokens.
    pub fn project_tokens<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        tokens: Var,
        modality: Modality,
    ) -> Result<Var> {
        let p = self.projection(modality);
        let w = tape.param(store, p.weight);
        let b = tape.param(store, p.bias);
        let y = tape.matmul(tokens, w)?;
        Ok(tape.add(y, b)?)
    }

    /// Encodes one already-projected sequence (`n×d`, `n ≥ 1`) to a `1×d`
    /// summary.
    pub fn encode_sequence<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        projected: Var,
        modality: Modality,
    ) -> Result<Var> {
        let (n, d) = tape.dims(projected);
        if d != self.dim() {
            return Err(Error::Data(format!("projected width {d}, encoder expects {}", self.dim())));
        }
        let mut tokens = projected;
        if self.cfg.positions(modality) {
            if n > self.cfg.max_tokens {
                return Err(Error::Data(format!(
                    "sequence of {n} exceeds max_tokens {}",
                    self.cfg.max_tokens
                )));
            }
            let pos = tape.param(store, self.positions);
            let pos = tape.slice_rows(pos, 0, n)?;
            tokens = tape.add(tokens, pos)?;
        }
        let ent = tape.param(store, self.ent_token);
        let x = tape.concat_rows(&[ent, tokens])?;
        let seg = [Segment::new(0, n + 1)];
        let h = self.transformer.forward(tape, store, x, &seg)?;
        self.pool(tape, h, &seg)
    }

    fn pool<T: Scalar>(&self, tape: &mut Tape<T>, h: Var, segments: &[Segment]) -> Result<Var> {
        Ok(match self.cfg.pooling {
            Pooling::Ent => {
                let starts: Vec<usize> = segments.iter().map(|s| s.start).collect();
                tape.gather_rows(h, &starts)?
            }
            Pooling::Mean => tape.segment_mean(h, segments)?,
        })
    }

    /// Encodes every entity's visual and textual sequence in one packed pass,
    /// returning `(e_vis, e_txt)`, each `entity_count×d`.
    pub fn encode_entities<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        visual: &PackedTokens,
        textual: &PackedTokens,
    ) -> Result<(Var, Var)> {
        let ne = visual.entity_count();
        if textual.entity_count() != ne {
            return Err(Error::Data("visual and textual packs cover different entity counts".into()));
        }
        let mut blocks = vec![tape.param(store, self.ent_token)];
        let mut bases = Vec::new();
        let mut next = 1;
        for pack in [visual, textual] {
            if pack.dim != self.token_dim(pack.modality) {
                return Err(Error::Data(format!(
                    "{} tokens have width {}, encoder expects {}",
                    pack.modality,
                    pack.dim,
                    self.token_dim(pack.modality)
                )));
            }
            let placeholder = tape.param(store, self.projection(pack.modality).placeholder);
            let raw = if pack.rows() > 0 {
                let data = pack.data.iter().map(|&v| T::of(v as f64)).collect();
                let c = tape.constant(pack.rows(), pack.dim, data)?;
                tape.concat_rows(&[c, placeholder])?
            } else {
                placeholder
            };
            blocks.push(self.project_tokens(tape, store, raw, pack.modality)?);
            bases.push(next);
            next += pack.rows() + 1;
        }
        let combined = tape.concat_rows(&blocks)?;

        let mut index = Vec::new();
        let mut pos_index = Vec::new();
        let mut segments = Vec::with_capacity(2 * ne);
        for (pack, base) in [visual, textual].into_iter().zip(bases) {
            let with_pos = self.cfg.positions(pack.modality);
            for e in 0..ne {
                let start = index.len();
                index.push(0);
                pos_index.push(0);
                let rows: Vec<usize> = match pack.span(e) {
                    Some((first, n)) => (base + first..base + first + n).collect(),
                    None => vec![base + pack.rows()],
                };
                for (p, row) in rows.iter().enumerate() {
                    index.push(*row);
                    pos_index.push(if with_pos { p + 1 } else { 0 });
                }
                segments.push(Segment::new(start, rows.len() + 1));
            }
        }
        let mut x = tape.gather_rows(combined, &index)?;
        if pos_index.iter().any(|&p| p > 0) {
            if let Some(&too_long) = pos_index.iter().find(|&&p| p > self.cfg.max_tokens) {
                return Err(Error::Data(format!(
                    "position {too_long} exceeds max_tokens {}",
                    self.cfg.max_tokens
                )));
            }
            let zero = tape.constant(1, self.dim(), vec![T::zero(); self.dim()])?;
            let pos = tape.param(store, self.positions);
            let table = tape.concat_rows(&[zero, pos])?;
            let pos = tape.gather_rows(table, &pos_index)?;
            x = tape.add(x, pos)?;
        }
        let h = self.transformer.forward(tape, store, x, &segments)?;
        let pooled = self.pool(tape, h, &segments)?;
        let e_vis = tape.slice_rows(pooled, 0, ne)?;
        let e_txt = tape.slice_rows(pooled, ne, ne)?;
        Ok((e_vis, e_txt))
    }
}
