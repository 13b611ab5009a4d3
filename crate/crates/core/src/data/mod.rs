//! Triples, token banks, synthetic datasets and batching.

mod bank;
mod batch;
mod synth;
mod triples;

pub use bank::{
    load_token_bank, read_token_bank, write_token_bank, BankEntry, Modality, TokenBank,
    BANK_MAGIC, BANK_VERSION,
};
pub(crate) use bank::Reader;
pub use batch::{batch_iter, batches};
pub use synth::{synth_generate, SynthConfig, SynthDataset};
pub use triples::{load_triples, write_triples, Split, Triple, TripleStore};

use std::path::Path;

use crate::error::Result;

pub const VISUAL_BANK_FILE: &str = "visual.mmtk";
pub const TEXTUAL_BANK_FILE: &str = "textual.mmtk";

/// Writes a synthetic dataset as triple files plus `visual.mmtk` and
/// `textual.mmtk`.
pub fn write_dataset(ds: &SynthDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    write_triples(&ds.store, dir)?;
    write_token_bank(&ds.visual, dir.join(VISUAL_BANK_FILE))?;
    write_token_bank(&ds.textual, dir.join(TEXTUAL_BANK_FILE))
}

/// A loaded dataset directory. Missing bank files yield `None`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub store: TripleStore,
    pub visual: Option<TokenBank>,
    pub textual: Option<TokenBank>,
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let store = load_triples(dir)?;
    let bank = |name: &str, m: Modality| -> Result<Option<TokenBank>> {
        let p = dir.join(name);
        if !p.exists() {
            return Ok(None);
        }
        let b = load_token_bank(&p, m)?;
        b.check_entities(store.entity_count())?;
        Ok(Some(b))
    };
    let visual = bank(VISUAL_BANK_FILE, Modality::Visual)?;
    let textual = bank(TEXTUAL_BANK_FILE, Modality::Textual)?;
    Ok(Dataset {
        store,
        visual,
        textual,
    })
}
