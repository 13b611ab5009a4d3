//! Desk-scale synthetic multi-modal graphs.
//!
//! Each entity gets a latent vector. Tails are drawn by a noisy bilinear
//! compatibility with the head's latent, and every modality token is a fixed
//! random projection of the entity latent plus token-level noise, so the token
//! banks carry real information about graph structure.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Modality, TokenBank, Triple, TripleStore};
use crate::error::{Error, Result};

const LATENT_DIM: usize = 8;
const TAIL_SHARPNESS: f64 = 3.0;
const TOKEN_NOISE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub entity_count: usize,
    pub relation_count: usize,
    pub triple_count: usize,
    pub tokens_per_modality: usize,
    pub token_dim: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            entity_count: 50,
            relation_count: 5,
            triple_count: 200,
            tokens_per_modality: 4,
            token_dim: 16,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("entity_count", self.entity_count),
            ("relation_count", self.relation_count),
            ("triple_count", self.triple_count),
            ("tokens_per_modality", self.tokens_per_modality),
            ("token_dim", self.token_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("synth {name} must be positive")));
        }
        let capacity = (self.entity_count as u128).pow(2) * self.relation_count as u128;
        if self.triple_count as u128 > capacity {
            return Err(Error::Config(format!(
                "synth triple_count {} exceeds entity_count²·relation_count = {capacity}",
                self.triple_count
            )));
        }
        Ok(())
    }

    /// `(train, valid, test)` sizes for an 80/10/10 split.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let tenth = self.triple_count / 10;
        (self.triple_count - 2 * tenth, tenth, tenth)
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub store: TripleStore,
    pub visual: TokenBank,
    pub textual: TokenBank,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect()
}

fn gumbel(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.gen_range(f64::EPSILON..1.0);
    -(-u.ln()).ln()
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (ne, nr) = (cfg.entity_count, cfg.relation_count);

    let latents: Vec<Vec<f64>> = (0..ne).map(|_| normal_vec(&mut rng, LATENT_DIM, 1.0)).collect();
    let rel_maps: Vec<Vec<f64>> = (0..nr)
        .map(|_| normal_vec(&mut rng, LATENT_DIM * LATENT_DIM, 1.0 / (LATENT_DIM as f64).sqrt()))
        .collect();

    let mut used = HashSet::new();
    let mut triples = Vec::with_capacity(cfg.triple_count);
    let mut misses = 0usize;
    let patience = 50 * ne.max(8);
    while triples.len() < cfg.triple_count && misses < patience {
        let h = rng.gen_range(0..ne);
        let r = rng.gen_range(0..nr);
        let m = &rel_maps[r];
        let mapped: Vec<f64> = (0..LATENT_DIM)
            .map(|i| (0..LATENT_DIM).map(|j| m[i * LATENT_DIM + j] * latents[h][j]).sum())
            .collect();
        // Gumbel-max sampling from softmax(sharpness · compatibility).
        let t = (0..ne)
            .map(|t| {
                let s: f64 = mapped.iter().zip(&latents[t]).map(|(a, b)| a * b).sum();
                (t, TAIL_SHARPNESS * s / (LATENT_DIM as f64).sqrt() + gumbel(&mut rng))
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(t, _)| t)
            .expect("entity_count > 0");
        let triple = Triple::new(h, r, t);
        if used.insert(triple) {
            triples.push(triple);
            misses = 0;
        } else {
            misses += 1;
        }
    }
    if triples.len() < cfg.triple_count {
        // Dense request: fill from the unused remainder uniformly.
        let mut rest: Vec<Triple> = (0..ne)
            .flat_map(|h| (0..nr).flat_map(move |r| (0..ne).map(move |t| Triple::new(h, r, t))))
            .filter(|t| !used.contains(t))
            .collect();
        rest.shuffle(&mut rng);
        triples.extend(rest.into_iter().take(cfg.triple_count - triples.len()));
    }
    triples.shuffle(&mut rng);

    let (n_train, n_valid, _) = cfg.split_sizes();
    let test = triples.split_off(n_train + n_valid);
    let valid = triples.split_off(n_train);
    let train = triples;

    let store = TripleStore::new(
        (0..ne).map(|i| format!("e{i}")).collect(),
        (0..nr).map(|i| format!("r{i}")).collect(),
        train,
        valid,
        test,
    )?;

    let mut bank_for = |modality: Modality| -> Result<TokenBank> {
        let d = cfg.token_dim;
        let proj = normal_vec(&mut rng, d * LATENT_DIM, 1.0 / (LATENT_DIM as f64).sqrt());
        let mut bank = TokenBank::new(modality, d)?;
        for (e, z) in latents.iter().enumerate() {
            let mut tokens = Vec::with_capacity(cfg.tokens_per_modality * d);
            for _ in 0..cfg.tokens_per_modality {
                let noisy: Vec<f64> = z
                    .iter()
                    .map(|&v| v + TOKEN_NOISE * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                for row in proj.chunks_exact(LATENT_DIM) {
                    let v: f64 = row.iter().zip(&noisy).map(|(a, b)| a * b).sum();
                    tokens.push(v as f32);
                }
            }
            bank.insert(e, tokens)?;
        }
        Ok(bank)
    };
    let visual = bank_for(Modality::Visual)?;
    let textual = bank_for(Modality::Textual)?;
    Ok(SynthDataset {
        store,
        visual,
        textual,
    })
}
