//! MMTK token banks: per-entity sequences of modality token vectors.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "MMTK" | version u16 = 1 | modality u8 (1 visual, 2 textual) | reserved u8 = 0
//! dim u32 | entity_count u64
//! repeated entity_count times:
//!     entity_id u64 | token_count u32 | token_count·dim f32 (row-major)
//! ```

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};

pub const BANK_MAGIC: [u8; 4] = *b"MMTK";
pub const BANK_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Visual,
    Textual,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::Visual => 1,
            Modality::Textual => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Modality::Visual),
            2 => Some(Modality::Textual),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Visual => "visual",
            Modality::Textual => "textual",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub entity: usize,
    /// `token_count × dim` values, row-major.
    pub tokens: Vec<f32>,
}

/// Token sequences for one modality. Entities may be absent.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBank {
    modality: Modality,
    dim: usize,
    entries: Vec<BankEntry>,
    index: HashMap<usize, usize>,
}

impl TokenBank {
    pub fn new(modality: Modality, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Data("token bank dim must be positive".into()));
        }
        Ok(TokenBank {
            modality,
            dim,
            entries: Vec::new(),
            index: HashMap::new(),
        })
    }

    /// Appends a sequence; `tokens.len()` must be a multiple of `dim`.
    pub fn insert(&mut self, entity: usize, tokens: Vec<f32>) -> Result<()> {
        if tokens.len() % self.dim != 0 {
            return Err(Error::Data(format!(
                "entity {entity}: {} values is not a multiple of dim {}",
                tokens.len(),
                self.dim
            )));
        }
        if self.index.contains_key(&entity) {
            return Err(Error::Data(format!("entity {entity} already has a sequence")));
        }
        self.index.insert(entity, self.entries.len());
        self.entries.push(BankEntry { entity, tokens });
        Ok(())
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    /// Flattened tokens for `entity`, or `None` when the modality is missing.
    pub fn tokens(&self, entity: usize) -> Option<&[f32]> {
        self.index.get(&entity).map(|&i| self.entries[i].tokens.as_slice())
    }

    pub fn token_count(&self, entity: usize) -> usize {
        self.tokens(entity).map_or(0, |t| t.len() / self.dim)
    }

    /// Fails if any entity id is outside `[0, entity_count)`.
    pub fn check_entities(&self, entity_count: usize) -> Result<()> {
        match self.entries.iter().find(|e| e.entity >= entity_count) {
            Some(e) => Err(Error::Data(format!(
                "{} bank references entity {} but the graph has {entity_count}",
                self.modality, e.entity
            ))),
            None => Ok(()),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.entries.iter().map(|e| 12 + 4 * e.tokens.len()).sum();
        let mut out = Vec::with_capacity(20 + payload);
        out.extend_from_slice(&BANK_MAGIC);
        out.extend_from_slice(&BANK_VERSION.to_le_bytes());
        out.push(self.modality.code());
        out.push(0);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.entity as u64).to_le_bytes());
            out.extend_from_slice(&((e.tokens.len() / self.dim) as u32).to_le_bytes());
            for v in &e.tokens {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        let magic = r.array::<4>()?;
        if magic != BANK_MAGIC {
            return Err(FormatError::BadMagic {
                found: magic,
                expected: BANK_MAGIC,
            });
        }
        let version = r.u16()?;
        if version != BANK_VERSION {
            return Err(FormatError::Version {
                found: version,
                expected: BANK_VERSION,
            });
        }
        let code = r.u8()?;
        let modality = Modality::from_code(code)
            .ok_or_else(|| FormatError::Invalid(format!("unknown modality code {code}")))?;
        let reserved = r.u8()?;
        if reserved != 0 {
            return Err(FormatError::Invalid(format!("reserved byte is {reserved}, expected 0")));
        }
        let dim = r.u32()? as usize;
        if dim == 0 {
            return Err(FormatError::Invalid("dim is 0".into()));
        }
        let count = r.u64()?;
        let mut bank = TokenBank {
            modality,
            dim,
            entries: Vec::new(),
            index: HashMap::new(),
        };
        for _ in 0..count {
            let entity = r.u64()? as usize;
            let tokens = r.u32()? as usize;
            let n = tokens
                .checked_mul(dim)
                .ok_or_else(|| FormatError::Invalid("token payload overflows".into()))?;
            let values = r.f32s(n)?;
            if bank.index.contains_key(&entity) {
                return Err(FormatError::Invalid(format!("entity {entity} appears twice")));
            }
            bank.index.insert(entity, bank.entries.len());
            bank.entries.push(BankEntry {
                entity,
                tokens: values,
            });
        }
        if r.remaining() != 0 {
            return Err(FormatError::Invalid(format!(
                "{} trailing bytes after last entity",
                r.remaining()
            )));
        }
        Ok(bank)
    }
}

/// Reads a bank and checks that it holds `expected` tokens.
pub fn load_token_bank(path: impl AsRef<Path>, expected: Modality) -> Result<TokenBank> {
    let path = path.as_ref();
    let bank = read_token_bank(path)?;
    if bank.modality != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            source: FormatError::ModalityMismatch {
                expected: expected.to_string(),
                found: bank.modality.to_string(),
            },
        });
    }
    Ok(bank)
}

pub fn read_token_bank(path: impl AsRef<Path>) -> Result<TokenBank> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TokenBank::from_bytes(&bytes).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_token_bank(bank: &TokenBank, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, bank.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Little-endian cursor over a byte slice that reports truncation.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.remaining() < n {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n - self.remaining(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn array<const N: usize>(&mut self) -> Result<[u8; N], FormatError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub(crate) fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub(crate) fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>, FormatError> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| {
            FormatError::Invalid("payload length overflows".into())
        })?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TokenBank {
        let mut b = TokenBank::new(Modality::Textual, 8).unwrap();
        b.insert(2, (0..24).map(|i| i as f32 * 0.5).collect()).unwrap();
        b.insert(0, vec![-1.0; 8]).unwrap();
        b.insert(5, (0..16).map(|i| (i as f32).sin()).collect()).unwrap();
        b
    }

    #[test]
    fn round_trip_preserves_shapes() {
        let b = sample();
        let back = TokenBank::from_bytes(&b.to_bytes()).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.len(), 3);
        assert_eq!(back.dim(), 8);
        assert_eq!(back.token_count(2), 3);
        assert_eq!(back.token_count(0), 1);
        assert_eq!(back.token_count(5), 2);
        assert_eq!(back.tokens(1), None);
    }

    #[test]
    fn header_layout_is_exact() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[0..4], b"MMTK");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(bytes[6], 2);
        assert_eq!(bytes[7], 0);
        assert_eq!(&bytes[8..12], &8u32.to_le_bytes());
        assert_eq!(&bytes[12..20], &3u64.to_le_bytes());
        assert_eq!(&bytes[20..28], &2u64.to_le_bytes());
        assert_eq!(&bytes[28..32], &3u32.to_le_bytes());
        assert_eq!(bytes.len(), 20 + 3 * 12 + 4 * (24 + 8 + 16));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = sample().to_bytes();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            TokenBank::from_bytes(&bytes),
            Err(FormatError::BadMagic { found, .. }) if &found == b"XXXX"
        ));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = sample().to_bytes();
        bytes[4] = 2;
        assert!(matches!(
            TokenBank::from_bytes(&bytes),
            Err(FormatError::Version { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn truncated_payload() {
        let bytes = sample().to_bytes();
        for cut in [3, 19, 30, bytes.len() - 1] {
            assert!(
                matches!(
                    TokenBank::from_bytes(&bytes[..cut]),
                    Err(FormatError::Truncated { .. })
                ),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = sample().to_bytes();
        bytes.push(0);
        assert!(matches!(TokenBank::from_bytes(&bytes), Err(FormatError::Invalid(_))));
    }

    #[test]
    fn modality_mismatch_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.mmtk");
        write_token_bank(&sample(), &p).unwrap();
        let err = load_token_bank(&p, Modality::Visual).unwrap_err();
        assert!(matches!(
            err,
            Error::Format {
                source: FormatError::ModalityMismatch { .. },
                ..
            }
        ));
        assert!(load_token_bank(&p, Modality::Textual).is_ok());
    }

    #[test]
    fn insert_validates() {
        let mut b = TokenBank::new(Modality::Visual, 4).unwrap();
        assert!(b.insert(0, vec![0.0; 5]).is_err());
        b.insert(0, vec![0.0; 4]).unwrap();
        assert!(b.insert(0, vec![0.0; 4]).is_err());
        assert!(b.check_entities(1).is_ok());
        assert!(b.check_entities(0).is_err());
    }
}
