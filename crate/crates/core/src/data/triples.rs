use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// A `(head, relation, tail)` fact with dense integer ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

impl Triple {
    pub fn new(head: usize, relation: usize, tail: usize) -> Self {
        Triple {
            head,
            relation,
            tail,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split {other:?} (expected train, valid or test)"
            ))),
        }
    }
}

/// Vocabularies, the three splits, and an index of every known answer.
///
/// Relation ids `r + relation_count` denote the inverse of `r`, so a head
/// query `(?, r, t)` is asked as the tail query `(t, r⁻¹, ?)`.
#[derive(Debug, Clone)]
pub struct TripleStore {
    entities: Vec<String>,
    relations: Vec<String>,
    train: Vec<Triple>,
    valid: Vec<Triple>,
    test: Vec<Triple>,
    answers: HashMap<(usize, usize), Vec<usize>>,
}

impl TripleStore {
    /// Validates ids and split disjointness, then builds the answer index.
    pub fn new(
        entities: Vec<String>,
        relations: Vec<String>,
        train: Vec<Triple>,
        valid: Vec<Triple>,
        test: Vec<Triple>,
    ) -> Result<Self> {
        if entities.is_empty() || relations.is_empty() {
            return Err(Error::Data("entity and relation vocabularies must be non-empty".into()));
        }
        if train.is_empty() {
            return Err(Error::Data("empty split: train".into()));
        }
        let (ne, nr) = (entities.len(), relations.len());
        for (split, triples) in [("train", &train), ("valid", &valid), ("test", &test)] {
            if let Some(t) = triples
                .iter()
                .find(|t| t.head >= ne || t.tail >= ne || t.relation >= nr)
            {
                return Err(Error::Data(format!(
                    "dangling id in {split}: {t:?} (entities {ne}, relations {nr})"
                )));
            }
        }
        let sets: Vec<HashSet<Triple>> = [&train, &valid, &test]
            .iter()
            .map(|s| s.iter().copied().collect())
            .collect();
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            if let Some(t) = sets[a].intersection(&sets[b]).next() {
                return Err(Error::Data(format!(
                    "splits {} and {} overlap on {t:?}",
                    Split::ALL[a],
                    Split::ALL[b]
                )));
            }
        }

        let mut answers: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for t in train.iter().chain(&valid).chain(&test) {
            answers.entry((t.head, t.relation)).or_default().push(t.tail);
            answers.entry((t.tail, t.relation + nr)).or_default().push(t.head);
        }
        for v in answers.values_mut() {
            v.sort_unstable();
            v.dedup();
        }
        Ok(TripleStore {
            entities,
            relations,
            train,
            valid,
            test,
            answers,
        })
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    /// Number of forward relations (inverse ids are not counted).
    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    pub fn entity_names(&self) -> &[String] {
        &self.entities
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relations
    }

    pub fn split(&self, split: Split) -> &[Triple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn inverse(&self, t: Triple) -> Triple {
        Triple::new(t.tail, t.relation + self.relation_count(), t.head)
    }

    /// Every triple of `split` followed by its inverse.
    pub fn with_inverses(&self, split: Split) -> Vec<Triple> {
        let base = self.split(split);
        base.iter()
            .copied()
            .chain(base.iter().map(|&t| self.inverse(t)))
            .collect()
    }

    /// Sorted entities `x` such that `(head, relation, x)` is known in any
    /// split; `relation` may be an inverse id.
    pub fn known_answers(&self, head: usize, relation: usize) -> &[usize] {
        self.answers
            .get(&(head, relation))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn is_known(&self, t: Triple) -> bool {
        self.known_answers(t.head, t.relation).binary_search(&t.tail).is_ok()
    }
}

fn resolve(dir: &Path, stem: &str) -> PathBuf {
    let plain = dir.join(stem);
    if plain.exists() {
        plain
    } else {
        dir.join(format!("{stem}.txt"))
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_vocab(path: &Path) -> Result<Vec<String>> {
    let text = read_text(path)?;
    let mut by_id: Vec<Option<String>> = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(name), Some(id), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::parse(path, lineno, "expected \"name<TAB>id\""));
        };
        let id: usize = id
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad id {id:?}")))?;
        if !seen.insert(name.to_string()) {
            return Err(Error::parse(path, lineno, format!("duplicate vocabulary entry {name:?}")));
        }
        if id >= by_id.len() {
            by_id.resize(id + 1, None);
        }
        if by_id[id].is_some() {
            return Err(Error::parse(path, lineno, format!("duplicate vocabulary id {id}")));
        }
        by_id[id] = Some(name.to_string());
    }
    by_id
        .into_iter()
        .enumerate()
        .map(|(id, n)| {
            n.ok_or_else(|| Error::Data(format!("{}: ids not dense, {id} missing", path.display())))
        })
        .collect()
}

fn read_split(path: &Path, entities: usize, relations: usize) -> Result<Vec<Triple>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                path,
                lineno,
                "expected \"head_id<TAB>relation_id<TAB>tail_id\"",
            ));
        }
        let mut ids = [0usize; 3];
        for (slot, f) in ids.iter_mut().zip(&fields) {
            *slot = f
                .trim()
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("bad id {f:?}")))?;
        }
        let [h, r, t] = ids;
        if h >= entities || t >= entities {
            return Err(Error::parse(
                path,
                lineno,
                format!("dangling entity id (have {entities} entities)"),
            ));
        }
        if r >= relations {
            return Err(Error::parse(
                path,
                lineno,
                format!("dangling relation id {r} (have {relations} relations)"),
            ));
        }
        out.push(Triple::new(h, r, t));
    }
    Ok(out)
}

/// Loads `entity2id`, `relation2id`, `train`, `valid` and `test` from `dir`
/// (each with or without a `.txt` suffix).
pub fn load_triples(dir: impl AsRef<Path>) -> Result<TripleStore> {
    let dir = dir.as_ref();
    let entities = read_vocab(&resolve(dir, "entity2id"))?;
    let relations = read_vocab(&resolve(dir, "relation2id"))?;
    let (ne, nr) = (entities.len(), relations.len());
    let train = read_split(&resolve(dir, "train"), ne, nr)?;
    if train.is_empty() {
        return Err(Error::Data(format!(
            "empty split: train ({})",
            resolve(dir, "train").display()
        )));
    }
    let valid = read_split(&resolve(dir, "valid"), ne, nr)?;
    let test = read_split(&resolve(dir, "test"), ne, nr)?;
    TripleStore::new(entities, relations, train, valid, test)
}

/// Writes the five text files in the layout read by [`load_triples`].
pub fn write_triples(store: &TripleStore, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, body: String| {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    let vocab = |names: &[String]| {
        names
            .iter()
            .enumerate()
            .map(|(i, n)| format!("{n}\t{i}\n"))
            .collect::<String>()
    };
    write("entity2id.txt", vocab(&store.entities))?;
    write("relation2id.txt", vocab(&store.relations))?;
    for split in Split::ALL {
        let body = store
            .split(split)
            .iter()
            .map(|t| format!("{}\t{}\t{}\n", t.head, t.relation, t.tail))
            .collect();
        write(&format!("{split}.txt"), body)?;
    }
    Ok(())
}
