//! Instrument-anchored attribute knowledge and its text embeddings.
//!
//! Knowledge lives in checked-in JSON fixtures: one entry per instrument
//! category with attribute phrases split over the instrument's functional
//! parts (tip, wrist, shaft), plus a background entry whose parts all read
//! "not present". Phrases are rendered through a fixed sentence template and
//! embedded either by the deterministic stub encoder or by vectors ingested
//! from a file.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Functional part of a surgical instrument.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Tip,
    Wrist,
    Shaft,
}

impl Part {
    pub const ALL: [Part; 3] = [Part::Tip, Part::Wrist, Part::Shaft];

    pub fn as_str(self) -> &'static str {
        match self {
            Part::Tip => "tip",
            Part::Wrist => "wrist",
            Part::Shaft => "shaft",
        }
    }
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Part {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tip" => Ok(Part::Tip),
            "wrist" => Ok(Part::Wrist),
            "shaft" => Ok(Part::Shaft),
            other => Err(Error::Schema(format!("unknown part tag '{other}'"))),
        }
    }
}

/// Name of the injected no-instrument entry.
pub const BACKGROUND_NAME: &str = "background";
/// The phrase every background part carries.
pub const BACKGROUND_PHRASE: &str = "not present";

/// One instrument category with its per-part attribute phrases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstrumentEntry {
    pub name: String,
    pub tip_attrs: Vec<String>,
    pub wrist_attrs: Vec<String>,
    pub shaft_attrs: Vec<String>,
}

impl InstrumentEntry {
    pub fn attrs(&self, part: Part) -> &[String] {
        match part {
            Part::Tip => &self.tip_attrs,
            Part::Wrist => &self.wrist_attrs,
            Part::Shaft => &self.shaft_attrs,
        }
    }

    fn background() -> Self {
        let one = vec![BACKGROUND_PHRASE.to_string()];
        Self {
            name: BACKGROUND_NAME.to_string(),
            tip_attrs: one.clone(),
            wrist_attrs: one.clone(),
            shaft_attrs: one,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Schema("instrument name must be nonempty".into()));
        }
        for part in Part::ALL {
            let attrs = self.attrs(part);
            if attrs.is_empty() {
                return Err(Error::Schema(format!(
                    "instrument '{}' has no {part} attributes",
                    self.name
                )));
            }
            let mut seen = std::collections::HashSet::new();
            for phrase in attrs {
                if phrase.is_empty() {
                    return Err(Error::Schema(format!(
                        "instrument '{}' has an empty {part} phrase",
                        self.name
                    )));
                }
                if !seen.insert(phrase) {
                    return Err(Error::Schema(format!(
                        "instrument '{}' repeats {part} phrase '{phrase}'",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }
}

// Wire format of the knowledge file.
#[derive(Deserialize)]
struct RawEntry {
    instrument: Option<String>,
    attribute: Option<RawAttrs>,
}

#[derive(Deserialize)]
struct RawAttrs {
    tip: Option<Vec<String>>,
    wrist: Option<Vec<String>>,
    shaft: Option<Vec<String>>,
}

/// The full attribute knowledge: all instrument entries plus the background.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    entries: Vec<InstrumentEntry>,
}

/// One rendered sentence: stable id, source part/phrase, and template text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceRecord {
    pub id: String,
    pub part: Part,
    pub phrase: String,
    pub text: String,
}

/// Stable sentence id for a `(part, phrase)` pair.
pub fn sentence_id(part: Part, phrase: &str) -> String {
    format!("{part}:{phrase}")
}

impl KnowledgeBase {
    /// Validate entries and append the background entry if it is missing.
    pub fn from_entries(mut entries: Vec<InstrumentEntry>) -> Result<Self> {
        for entry in &entries {
            entry.validate()?;
        }
        match entries.iter().find(|e| e.name == BACKGROUND_NAME) {
            Some(bg) if *bg != InstrumentEntry::background() => {
                return Err(Error::Schema(format!(
                    "background entry must carry exactly the phrase '{BACKGROUND_PHRASE}' per part"
                )));
            }
            Some(_) => {}
            None => entries.push(InstrumentEntry::background()),
        }
        Ok(Self { entries })
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let raw: Vec<RawEntry> = serde_json::from_str(text)?;
        let mut entries = Vec::with_capacity(raw.len());
        for item in raw {
            let name = item
                .instrument
                .ok_or_else(|| Error::Schema("entry missing 'instrument' field".into()))?;
            let attrs = item
                .attribute
                .ok_or_else(|| Error::Schema(format!("instrument '{name}' missing 'attribute'")))?;
            let take = |list: Option<Vec<String>>, part: Part| -> Result<Vec<String>> {
                list.ok_or_else(|| {
                    Error::Schema(format!("instrument '{name}' missing '{part}' list"))
                })
            };
            entries.push(InstrumentEntry {
                tip_attrs: take(attrs.tip, Part::Tip)?,
                wrist_attrs: take(attrs.wrist, Part::Wrist)?,
                shaft_attrs: take(attrs.shaft, Part::Shaft)?,
                name,
            });
        }
        Self::from_entries(entries)
    }

    pub fn parse_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    pub fn entries(&self) -> &[InstrumentEntry] {
        &self.entries
    }

    /// Deduplicated union of all phrases for one part, in first-appearance
    /// order over entries.
    pub fn union_set(&self, part: Part) -> Vec<String> {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        for entry in &self.entries {
            for phrase in entry.attrs(part) {
                if seen.insert(phrase.clone()) {
                    out.push(phrase.clone());
                }
            }
        }
        out
    }

    /// All rendered sentences: the three union sets in part order
    /// tip, wrist, shaft.
    pub fn sentences(&self) -> Vec<SentenceRecord> {
        let mut out = Vec::new();
        for part in Part::ALL {
            for phrase in self.union_set(part) {
                let text = render_sentence(part, &phrase).expect("union phrases are nonempty");
                out.push(SentenceRecord {
                    id: sentence_id(part, &phrase),
                    part,
                    phrase,
                    text,
                });
            }
        }
        out
    }
}

/// Render a phrase through the fixed template:
/// `The {part} of the surgical instrument is {phrase}.`
pub fn render_sentence(part: Part, phrase: &str) -> Result<String> {
    if phrase.is_empty() {
        return Err(Error::Schema("cannot render an empty phrase".into()));
    }
    Ok(format!("The {part} of the surgical instrument is {phrase}."))
}

/// Deterministic pseudo-embedding standing in for a frozen text encoder:
/// SHA-256 of `(seed, sentence)` keys a ChaCha stream that draws `dim`
/// standard normals, which are then L2-normalized.
pub fn stub_encode(sentence: &str, dim: usize, seed: u64) -> Result<Vec<f64>> {
    if dim < 2 {
        return Err(Error::Config(format!("embedding dim {dim} must be >= 2")));
    }
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(sentence.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(key);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    Ok(v)
}

/// Where an embedding table's vectors came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSource {
    Stub,
    File,
}

/// Sentence-id keyed embedding vectors of one shared dimension, in a stable
/// insertion order.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    source: EmbeddingSource,
    ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn from_records(
        records: Vec<(String, Vec<f64>)>,
        source: EmbeddingSource,
    ) -> Result<Self> {
        let Some(dim) = records.first().map(|(_, v)| v.len()) else {
            return Err(Error::Format("embedding table has no records".into()));
        };
        let mut ids = Vec::with_capacity(records.len());
        let mut vectors = Vec::with_capacity(records.len());
        let mut index = HashMap::new();
        for (id, v) in records {
            if v.len() != dim {
                return Err(Error::Format(format!(
                    "embedding '{id}' has dim {}, expected {dim}",
                    v.len()
                )));
            }
            if index.insert(id.clone(), ids.len()).is_some() {
                return Err(Error::Format(format!("duplicate embedding id '{id}'")));
            }
            ids.push(id);
            vectors.push(v);
        }
        Ok(Self {
            dim,
            source,
            ids,
            vectors,
            index,
        })
    }

    /// Stub-encode every rendered sentence of the knowledge base.
    pub fn stub_for(kb: &KnowledgeBase, dim: usize, seed: u64) -> Result<Self> {
        let records = kb
            .sentences()
            .into_iter()
            .map(|s| Ok((s.id, stub_encode(&s.text, dim, seed)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_records(records, EmbeddingSource::Stub)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn source(&self) -> EmbeddingSource {
        self.source
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.index.get(id).map(|&i| self.vectors[i].as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.ids
            .iter()
            .zip(&self.vectors)
            .map(|(id, v)| (id.as_str(), v.as_slice()))
    }

    /// Records for the ids whose `part:` prefix matches, in table order.
    pub fn part_records(&self, part: Part) -> Vec<(String, Vec<f64>)> {
        let prefix = format!("{part}:");
        self.ids
            .iter()
            .zip(&self.vectors)
            .filter(|(id, _)| id.starts_with(&prefix))
            .map(|(id, v)| (id.clone(), v.clone()))
            .collect()
    }

    /// Write as `<sentence-id>\t<v1>,<v2>,...` lines; floats use the shortest
    /// representation that parses back bit-identically.
    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "# sentence embeddings, dim {}", self.dim)?;
        for (id, v) in self.iter() {
            let vals: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
            writeln!(f, "{id}\t{}", vals.join(","))?;
        }
        Ok(())
    }

    /// Parse an embedding file, enforcing one shared dimension and the
    /// presence of every expected id.
    pub fn ingest(path: impl AsRef<Path>, expected_ids: &[String]) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref())?;
        let mut records = Vec::new();
        for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (id, rest) = trimmed.split_once('\t').ok_or_else(|| {
                Error::Format(format!("line {}: expected '<id>\\t<values>'", lineno + 1))
            })?;
            let values = rest
                .split(',')
                .map(|s| {
                    s.trim().parse::<f64>().map_err(|e| {
                        Error::Format(format!("line {}: bad float '{s}': {e}", lineno + 1))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            records.push((id.to_string(), values));
        }
        let table = Self::from_records(records, EmbeddingSource::File)?;
        for id in expected_ids {
            if table.get(id).is_none() {
                return Err(Error::Format(format!("missing expected embedding '{id}'")));
            }
        }
        Ok(table)
    }
}

#[derive(Serialize)]
struct WireEntry<'a> {
    instrument: &'a str,
    attribute: WireAttrs<'a>,
}

#[derive(Serialize)]
struct WireAttrs<'a> {
    tip: &'a [String],
    wrist: &'a [String],
    shaft: &'a [String],
}

#[derive(Serialize, Deserialize)]
struct KbMeta {
    dim: usize,
    source: EmbeddingSource,
}

/// Write a knowledge-base directory: `knowledge.json`, `sentences.tsv`,
/// `embeddings.tsv`, and `meta.json`.
pub fn write_kb_dir(
    kb: &KnowledgeBase,
    table: &EmbeddingTable,
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let wire: Vec<WireEntry> = kb
        .entries()
        .iter()
        .map(|e| WireEntry {
            instrument: &e.name,
            attribute: WireAttrs {
                tip: &e.tip_attrs,
                wrist: &e.wrist_attrs,
                shaft: &e.shaft_attrs,
            },
        })
        .collect();
    std::fs::write(
        dir.join("knowledge.json"),
        serde_json::to_string_pretty(&wire)?,
    )?;
    let mut sentences = String::new();
    for s in kb.sentences() {
        sentences.push_str(&format!("{}\t{}\n", s.id, s.text));
    }
    std::fs::write(dir.join("sentences.tsv"), sentences)?;
    table.write_file(dir.join("embeddings.tsv"))?;
    std::fs::write(
        dir.join("meta.json"),
        serde_json::to_string_pretty(&KbMeta {
            dim: table.dim(),
            source: table.source(),
        })?,
    )?;
    Ok(())
}

/// Load a knowledge-base directory written by [`write_kb_dir`], checking
/// that every rendered sentence has an embedding.
pub fn load_kb_dir(dir: impl AsRef<Path>) -> Result<(KnowledgeBase, EmbeddingTable)> {
    let dir = dir.as_ref();
    let kb = KnowledgeBase::parse_file(dir.join("knowledge.json"))?;
    let expected: Vec<String> = kb.sentences().into_iter().map(|s| s.id).collect();
    let table = EmbeddingTable::ingest(dir.join("embeddings.tsv"), &expected)?;
    Ok((kb, table))
}
