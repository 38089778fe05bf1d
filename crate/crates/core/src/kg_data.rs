//! Triple files, vocabularies, entity texts and the true-triple index.
//!
//! Triple files are UTF-8 TSV, one `head<TAB>relation<TAB>tail` per line, no
//! header. Vocabulary ids are assigned in first-seen order over train, then
//! valid, then test, so reloading the same files always yields the same ids.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type EntityId = u32;
pub type RelationId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub const fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Self { head, relation, tail }
    }
}

/// Bijective label <-> dense id mapping.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab {
    id_to_label: Vec<String>,
    label_to_id: HashMap<String, u32>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a vocab from labels in id order. Duplicates are rejected.
    pub fn from_labels<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self::new();
        for label in labels {
            let label = label.into();
            if vocab.get(&label).is_some() {
                return Err(Error::Duplicate { kind: "label", label });
            }
            vocab.intern(&label);
        }
        Ok(vocab)
    }

    pub fn intern(&mut self, label: &str) -> u32 {
        if let Some(&id) = self.label_to_id.get(label) {
            return id;
        }
        let id = self.id_to_label.len() as u32;
        self.id_to_label.push(label.to_owned());
        self.label_to_id.insert(label.to_owned(), id);
        id
    }

    pub fn get(&self, label: &str) -> Option<u32> {
        self.label_to_id.get(label).copied()
    }

    pub fn label(&self, id: u32) -> &str {
        &self.id_to_label[id as usize]
    }

    pub fn labels(&self) -> &[String] {
        &self.id_to_label
    }

    pub fn len(&self) -> usize {
        self.id_to_label.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_label.is_empty()
    }
}

/// How labels in a triple file are resolved to ids.
pub enum Labels<'a> {
    /// Unseen labels get the next free id.
    Intern {
        entities: &'a mut Vocab,
        relations: &'a mut Vocab,
    },
    /// Unseen labels are an error.
    Strict { entities: &'a Vocab, relations: &'a Vocab },
}

impl Labels<'_> {
    fn entity(&mut self, label: &str) -> Result<EntityId> {
        match self {
            Labels::Intern { entities, .. } => Ok(entities.intern(label)),
            Labels::Strict { entities, .. } => entities.get(label).ok_or_else(|| Error::UnknownLabel {
                kind: "entity",
                label: label.to_owned(),
            }),
        }
    }

    fn relation(&mut self, label: &str) -> Result<RelationId> {
        match self {
            Labels::Intern { relations, .. } => Ok(relations.intern(label)),
            Labels::Strict { relations, .. } => relations.get(label).ok_or_else(|| Error::UnknownLabel {
                kind: "relation",
                label: label.to_owned(),
            }),
        }
    }
}

/// Parses TSV triples from any reader. Blank lines are skipped; any other line
/// must have exactly three tab-separated fields.
pub fn read_triples<R: BufRead>(reader: R, source_name: &str, mut labels: Labels<'_>) -> Result<Vec<Triple>> {
    let mut triples = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            source_name: source_name.to_owned(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                source_name: source_name.to_owned(),
                line: lineno + 1,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let head = labels.entity(fields[0])?;
        let relation = labels.relation(fields[1])?;
        let tail = labels.entity(fields[2])?;
        triples.push(Triple::new(head, relation, tail));
    }
    Ok(triples)
}

pub fn load_triple_file(path: impl AsRef<Path>, labels: Labels<'_>) -> Result<Vec<Triple>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_triples(BufReader::new(file), &path.display().to_string(), labels)
}

/// Train/valid/test splits over a shared vocabulary.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TripleStore {
    pub entities: Vocab,
    pub relations: Vocab,
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
}

impl TripleStore {
    pub fn load(train: impl AsRef<Path>, valid: impl AsRef<Path>, test: impl AsRef<Path>) -> Result<Self> {
        let mut entities = Vocab::new();
        let mut relations = Vocab::new();
        let mut split = |path: &Path| {
            load_triple_file(
                path,
                Labels::Intern {
                    entities: &mut entities,
                    relations: &mut relations,
                },
            )
        };
        let train = split(train.as_ref())?;
        let valid = split(valid.as_ref())?;
        let test = split(test.as_ref())?;
        Ok(Self {
            entities,
            relations,
            train,
            valid,
            test,
        })
    }

    /// Loads `train.txt`, `valid.txt` and `test.txt` from a directory.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        Self::load(dir.join("train.txt"), dir.join("valid.txt"), dir.join("test.txt"))
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn all_triples(&self) -> impl Iterator<Item = &Triple> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    pub fn write_tsv<W: Write>(&self, triples: &[Triple], mut w: W) -> std::io::Result<()> {
        for t in triples {
            writeln!(
                w,
                "{}\t{}\t{}",
                self.entities.label(t.head),
                self.relations.label(t.relation),
                self.entities.label(t.tail)
            )?;
        }
        w.flush()
    }

    /// Writes the three splits as `train.txt`/`valid.txt`/`test.txt` under `dir`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, split) in [
            ("train.txt", &self.train),
            ("valid.txt", &self.valid),
            ("test.txt", &self.test),
        ] {
            let path = dir.join(name);
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            self.write_tsv(split, BufWriter::new(file))
                .map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Label text per entity id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityTextTable {
    texts: Vec<String>,
}

impl EntityTextTable {
    /// Every entity's text is its own vocab label.
    pub fn from_labels(vocab: &Vocab) -> Self {
        Self {
            texts: vocab.labels().to_vec(),
        }
    }

    pub fn from_texts(texts: Vec<String>) -> Self {
        Self { texts }
    }

    pub fn get(&self, entity: EntityId) -> &str {
        &self.texts[entity as usize]
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.texts.iter().map(String::as_str)
    }
}

/// Reads `entity_label<TAB>free text` lines. Entities missing from the file keep
/// their vocab label as text; lines for unknown labels are skipped with a warning.
pub fn load_entity_texts(path: impl AsRef<Path>, vocab: &Vocab) -> Result<EntityTextTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_entity_texts(BufReader::new(file), &path.display().to_string(), vocab)
}

pub fn read_entity_texts<R: BufRead>(reader: R, source_name: &str, vocab: &Vocab) -> Result<EntityTextTable> {
    let mut table = EntityTextTable::from_labels(vocab);
    let mut seen = vec![false; vocab.len()];
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            source_name: source_name.to_owned(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.is_empty() {
            continue;
        }
        let Some((label, text)) = line.split_once('\t') else {
            return Err(Error::Parse {
                source_name: source_name.to_owned(),
                line: lineno + 1,
                message: "expected `label<TAB>text`".to_owned(),
            });
        };
        let Some(id) = vocab.get(label) else {
            log::warn!(
                "{source_name}:{}: skipping text for unknown entity `{label}`",
                lineno + 1
            );
            continue;
        };
        if std::mem::replace(&mut seen[id as usize], true) {
            return Err(Error::Duplicate {
                kind: "entity text",
                label: label.to_owned(),
            });
        }
        table.texts[id as usize] = text.to_owned();
    }
    Ok(table)
}

/// Every known true triple, indexed for filtered ranking.
#[derive(Debug, Clone, Default)]
pub struct TrueTripleIndex {
    tails: HashMap<(EntityId, RelationId), HashSet<EntityId>>,
    heads: HashMap<(RelationId, EntityId), HashSet<EntityId>>,
    len: usize,
}

impl TrueTripleIndex {
    pub fn from_triples<'a>(triples: impl IntoIterator<Item = &'a Triple>) -> Self {
        let mut index = Self::default();
        for t in triples {
            if index.tails.entry((t.head, t.relation)).or_default().insert(t.tail) {
                index.heads.entry((t.relation, t.tail)).or_default().insert(t.head);
                index.len += 1;
            }
        }
        index
    }

    pub fn contains(&self, triple: &Triple) -> bool {
        self.tails
            .get(&(triple.head, triple.relation))
            .is_some_and(|s| s.contains(&triple.tail))
    }

    pub fn tails(&self, head: EntityId, relation: RelationId) -> Option<&HashSet<EntityId>> {
        self.tails.get(&(head, relation))
    }

    pub fn heads(&self, relation: RelationId, tail: EntityId) -> Option<&HashSet<EntityId>> {
        self.heads.get(&(relation, tail))
    }

    /// Number of distinct triples.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Index over train, valid and test.
pub fn build_true_index(store: &TripleStore) -> TrueTripleIndex {
    TrueTripleIndex::from_triples(store.all_triples())
}
