//! The full link-prediction model: structural embeddings, the shared token
//! encoder, view fusion and the tail decoder.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tsam_autodiff::{ParamId, ParamStore, Scalar, Segment, Tape, Tensor, Var};

use crate::data::{Modality, TokenBank};
use crate::encoder::{EncoderConfig, ModalityEncoder, PackedTokens, Pooling};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionKind};
use crate::init;
use crate::kge::{init_embeddings, KgeParams, ScoreFn};
use crate::transformer::{Transformer, TransformerConfig};

/// How a decoded query is turned into per-candidate scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    /// `⟨t_pred, e_f(t)⟩` with the decoder output `t_pred`.
    Decoder,
    /// The configured KGE plausibility on fused representations.
    Kge,
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreMode::Decoder => "decoder",
            ScoreMode::Kge => "kge",
        })
    }
}

impl FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decoder" => Ok(ScoreMode::Decoder),
            "kge" => Ok(ScoreMode::Kge),
            other => Err(Error::Config(format!(
                "unknown score_mode {other:?} (expected decoder or kge)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub score_fn: ScoreFn,
    pub score_mode: ScoreMode,
    pub enable_fgmaf: bool,
    pub fusion: FusionKind,
    pub max_tokens: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub encoder_ffn_dim: usize,
    pub pooling: Pooling,
    pub text_positions: bool,
    pub visual_positions: bool,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub decoder_ffn_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            score_fn: ScoreFn::Tucker,
            score_mode: ScoreMode::Decoder,
            enable_fgmaf: true,
            fusion: FusionKind::Sum,
            max_tokens: 16,
            encoder_layers: 2,
            encoder_heads: 4,
            encoder_ffn_dim: 128,
            pooling: Pooling::Ent,
            text_positions: true,
            visual_positions: false,
            decoder_layers: 2,
            decoder_heads: 4,
            decoder_ffn_dim: 128,
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            transformer: TransformerConfig {
                layers: self.encoder_layers,
                heads: self.encoder_heads,
                dim: self.dim,
                ffn_dim: self.encoder_ffn_dim,
            },
            pooling: self.pooling,
            text_positions: self.text_positions,
            visual_positions: self.visual_positions,
            max_tokens: self.max_tokens,
        }
    }

    pub fn decoder(&self) -> TransformerConfig {
        TransformerConfig {
            layers: self.decoder_layers,
            heads: self.decoder_heads,
            dim: self.dim,
            ffn_dim: self.decoder_ffn_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder().transformer.validate("encoder")?;
        self.decoder().validate("decoder")?;
        if self.max_tokens == 0 {
            return Err(Error::Config("data.max_tokens must be positive".into()));
        }
        if self.score_fn == ScoreFn::RotatE && self.dim % 2 != 0 {
            return Err(Error::Config(format!("rotate needs an even model.dim, got {}", self.dim)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    transformer: Transformer,
    cls: ParamId,
    slots: ParamId,
}

/// Per-entity views for one forward pass, all `entity_count×d`.
#[derive(Debug, Clone, Copy)]
pub struct EntityViews {
    pub e_str: Var,
    pub e_vis: Option<Var>,
    pub e_txt: Option<Var>,
    pub e_f: Var,
    /// `entity_count×3` view weights; absent when fusion is off.
    pub weights: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    kge: KgeParams,
    encoder: ModalityEncoder,
    fusion: Fusion,
    decoder: Decoder,
    visual: PackedTokens,
    textual: PackedTokens,
}

impl Model {
    /// Builds the model and its freshly initialised parameters. Missing banks
    /// (or entities absent from a bank) fall back to the learned placeholder.
    pub fn new(
        cfg: ModelConfig,
        entity_count: usize,
        relation_count: usize,
        visual: Option<&TokenBank>,
        textual: Option<&TokenBank>,
        seed: u64,
    ) -> Result<(Model, ParamStore)> {
        cfg.validate()?;
        for bank in [visual, textual].into_iter().flatten() {
            bank.check_entities(entity_count)?;
        }
        let visual = PackedTokens::new(visual, Modality::Visual, entity_count, cfg.max_tokens, cfg.dim)?;
        let textual =
            PackedTokens::new(textual, Modality::Textual, entity_count, cfg.max_tokens, cfg.dim)?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let kge = init_embeddings(&mut store, entity_count, relation_count, cfg.dim, cfg.score_fn, &mut rng)?;
        let encoder =
            ModalityEncoder::new(&mut store, cfg.encoder(), visual.dim, textual.dim, &mut rng)?;
        let fusion = Fusion::new(&mut store, cfg.fusion, cfg.dim, &mut rng);
        let decoder = Decoder {
            transformer: Transformer::new(&mut store, "decoder", cfg.decoder(), &mut rng)?,
            cls: store.add("decoder.cls_token", init::normal(&mut rng, 1, cfg.dim, 1.0)),
            slots: store.add("decoder.slots", init::normal(&mut rng, 2, cfg.dim, 0.1)),
        };
        let model = Model {
            cfg,
            kge,
            encoder,
            fusion,
            decoder,
            visual,
            textual,
        };
        Ok((model, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn kge(&self) -> &KgeParams {
        &self.kge
    }

    pub fn encoder(&self) -> &ModalityEncoder {
        &self.encoder
    }

    pub fn fusion(&self) -> &Fusion {
        &self.fusion
    }

    pub fn entity_count(&self) -> usize {
        self.kge.entity_count
    }

    pub fn relation_count(&self) -> usize {
        self.kge.relation_count
    }

    pub fn cls_token_id(&self) -> ParamId {
        self.decoder.cls
    }

    pub fn packed(&self, m: Modality) -> &PackedTokens {
        match m {
            Modality::Visual => &self.visual,
            Modality::Textual => &self.textual,
        }
    }

    /// Every entity's views. Token sequences are encoded when fusion is on or
    /// `need_modalities` asks for them (contrastive alignment).
    pub fn entity_views<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        need_modalities: bool,
    ) -> Result<EntityViews> {
        let e_str = tape.param(store, self.kge.entity);
        if !(self.cfg.enable_fgmaf || need_modalities) {
            return Ok(EntityViews {
                e_str,
                e_vis: None,
                e_txt: None,
                e_f: e_str,
                weights: None,
            });
        }
        let (e_vis, e_txt) = self.encoder.encode_entities(tape, store, &self.visual, &self.textual)?;
        let (e_f, weights) = if self.cfg.enable_fgmaf {
            let (f, w) = self.fusion.fuse_all(tape, store, e_str, e_vis, e_txt)?;
            (f, Some(w))
        } else {
            (e_str, None)
        };
        Ok(EntityViews {
            e_str,
            e_vis: Some(e_vis),
            e_txt: Some(e_txt),
            e_f,
            weights,
        })
    }

    /// Runs the decoder over `([CLS], h_f, r)` for each of the `B` rows of
    /// `heads` and `rels` and returns the `[CLS]` states, `B×d`.
    pub fn decode_tail<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        heads: Var,
        rels: Var,
    ) -> Result<Var> {
        let (b, d) = tape.dims(heads);
        if tape.dims(rels) != (b, d) || d != self.cfg.dim {
            return Err(Error::Data(format!(
                "decoder inputs {:?} and {:?}, model dim {}",
                (b, d),
                tape.dims(rels),
                self.cfg.dim
            )));
        }
        let cls = tape.param(store, self.decoder.cls);
        let rows = tape.concat_rows(&[cls, heads, rels])?;
        let order: Vec<usize> = (0..b).flat_map(|q| [0, 1 + q, 1 + b + q]).collect();
        let x = tape.gather_rows(rows, &order)?;
        // Slot embeddings mark the head and relation rows; [CLS] gets none.
        let zero = tape.constant(1, d, vec![T::zero(); d])?;
        let slots = tape.param(store, self.decoder.slots);
        let table = tape.concat_rows(&[zero, slots])?;
        let slot_rows: Vec<usize> = (0..b).flat_map(|_| [0, 1, 2]).collect();
        let pos = tape.gather_rows(table, &slot_rows)?;
        let x = tape.add(x, pos)?;
        let segments: Vec<Segment> = (0..b).map(|q| Segment::new(3 * q, 3)).collect();
        let h = self.decoder.transformer.forward(tape, store, x, &segments)?;
        let cls_rows: Vec<usize> = (0..b).map(|q| 3 * q).collect();
        Ok(tape.gather_rows(h, &cls_rows)?)
    }

    /// `B×E` scores (before the sigmoid) of every entity as the tail of
    /// `(heads[b], relations[b], ?)`; relation ids may be inverse ids.
    pub fn score_queries<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        e_f: Var,
        heads: &[usize],
        relations: &[usize],
    ) -> Result<Var> {
        if heads.len() != relations.len() || heads.is_empty() {
            return Err(Error::Data("score_queries needs matching, non-empty heads and relations".into()));
        }
        if let Some(&bad) = heads.iter().find(|&&h| h >= self.entity_count()) {
            return Err(Error::Data(format!("entity id {bad} out of range")));
        }
        let h = tape.gather_rows(e_f, heads)?;
        let rel = self.kge.relations(tape, store, relations)?;
        match self.cfg.score_mode {
            ScoreMode::Decoder => {
                let r_in = self.kge.relation_input(tape, rel)?;
                let t_pred = self.decode_tail(tape, store, h, r_in)?;
                let ct = tape.transpose(e_f);
                Ok(tape.matmul(t_pred, ct)?)
            }
            ScoreMode::Kge => self.kge.plausibility(tape, store, h, rel, e_f),
        }
    }

    /// Precomputes fused entity representations for repeated scoring without
    /// gradients.
    pub fn scorer<'a>(&'a self, store: &'a ParamStore) -> Result<Scorer<'a>> {
        let mut tape = Tape::new();
        let views = self.entity_views(&mut tape, store, false)?;
        let e_f = tape.to_tensor(views.e_f);
        let weights = views.weights.map(|w| tape.to_tensor(w));
        if !e_f.data().iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite fused entity representation".into()));
        }
        Ok(Scorer {
            model: self,
            store,
            e_f,
            weights,
        })
    }
}

/// Scores queries against cached fused entity representations.
pub struct Scorer<'a> {
    model: &'a Model,
    store: &'a ParamStore,
    e_f: Tensor,
    weights: Option<Tensor>,
}

impl Scorer<'_> {
    pub const CHUNK: usize = 256;

    pub fn fused(&self) -> &Tensor {
        &self.e_f
    }

    pub fn weights(&self) -> Option<&Tensor> {
        self.weights.as_ref()
    }

    /// One score row per `(head, relation)` query, in query order.
    pub fn score(&self, queries: &[(usize, usize)]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(queries.len());
        for chunk in queries.chunks(Self::CHUNK) {
            let mut tape = Tape::new();
            let e_f = tape.constant_tensor(&self.e_f);
            let heads: Vec<usize> = chunk.iter().map(|q| q.0).collect();
            let rels: Vec<usize> = chunk.iter().map(|q| q.1).collect();
            let s = self.model.score_queries(&mut tape, self.store, e_f, &heads, &rels)?;
            let e = self.model.entity_count();
            out.extend(tape.value(s).chunks_exact(e).map(<[f32]>::to_vec));
        }
        Ok(out)
    }
}
