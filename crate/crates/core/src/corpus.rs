//! Corpus ingestion, tag vocabularies and the character-pair relation grid.
//!
//! Entities are converted into an `n × n` grid of tag sets. For an entity
//! `[c₁ … c_m]` of type `y`, each consecutive pair `(c_k, c_{k+1})` receives
//! `NNC` at `(c_k, c_{k+1})` and `PNC` at `(c_{k+1}, c_k)`; the boundary is
//! marked with `THC_y` at `(c_m, c₁)` and `HTC_y` at `(c₁, c_m)`. A
//! single-character entity carries both typed tags on the diagonal.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: malformed record: {message}")]
    Malformed { path: PathBuf, line: usize, message: String },
    #[error("{path}:{line}: entity index {index} out of range for sentence of length {len}")]
    IndexOutOfRange { path: PathBuf, line: usize, index: usize, len: usize },
    #[error("{path}:{line}: empty sentence")]
    EmptySentence { path: PathBuf, line: usize },
    #[error("{path}:{line}: unknown column layout ({fields} fields, expected char and label)")]
    UnknownLayout { path: PathBuf, line: usize, fields: usize },
    #[error("unknown entity type {0:?}")]
    UnknownEntityType(String),
    #[error("invalid entity in sentence {id}: {message}")]
    InvalidEntity { id: String, message: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityMention {
    pub indices: Vec<usize>,
    #[serde(rename = "type")]
    pub entity_type: String,
}

impl EntityMention {
    pub fn new(indices: Vec<usize>, entity_type: impl Into<String>) -> Self {
        Self { indices, entity_type: entity_type.into() }
    }

    pub fn is_contiguous(&self) -> bool {
        self.indices.windows(2).all(|w| w[1] == w[0] + 1)
    }

    fn check(&self, len: usize) -> Result<(), String> {
        if self.indices.is_empty() {
            return Err("entity has no indices".into());
        }
        if self.indices.windows(2).any(|w| w[1] <= w[0]) {
            return Err(format!("indices {:?} are not strictly increasing", self.indices));
        }
        match self.indices.iter().find(|&&i| i >= len) {
            Some(i) => Err(format!("index {i} out of range for length {len}")),
            None => Ok(()),
        }
    }
}

impl fmt::Display for EntityMention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let idx: Vec<String> = self.indices.iter().map(|i| i.to_string()).collect();
        write!(f, "[{}] {}", idx.join(","), self.entity_type)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: String,
    #[serde(rename = "text")]
    pub chars: Vec<String>,
    #[serde(default)]
    pub entities: Vec<EntityMention>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        for e in &self.entities {
            e.check(self.len()).map_err(|message| CorpusError::InvalidEntity { id: self.id.clone(), message })?;
        }
        Ok(())
    }

    pub fn entity_set(&self) -> BTreeSet<EntityMention> {
        self.entities.iter().cloned().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Jsonl,
    Conll,
}

impl std::str::FromStr for CorpusFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(Self::Jsonl),
            "conll" => Ok(Self::Conll),
            other => Err(format!("unknown corpus format {other:?}")),
        }
    }
}

impl CorpusFormat {
    /// Guesses from the file extension; anything not `.jsonl`/`.json` is conll.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => Self::Jsonl,
            _ => Self::Conll,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub sentences: usize,
    pub entities: usize,
    pub entity_types: usize,
    pub type_names: Vec<String>,
    pub characters: usize,
    pub max_len: usize,
    /// Grid cells that receive tags from more than one entity.
    pub cell_collisions: usize,
}

impl CorpusStats {
    pub fn compute(sentences: &[Sentence]) -> Self {
        let types: BTreeSet<&str> =
            sentences.iter().flat_map(|s| s.entities.iter().map(|e| e.entity_type.as_str())).collect();
        let mut cell_collisions = 0;
        for s in sentences {
            let mut owners: BTreeMap<(usize, usize), usize> = BTreeMap::new();
            for e in &s.entities {
                let mut cells = BTreeSet::new();
                for w in e.indices.windows(2) {
                    cells.insert((w[0], w[1]));
                    cells.insert((w[1], w[0]));
                }
                let (head, tail) = (e.indices[0], *e.indices.last().unwrap_or(&e.indices[0]));
                cells.insert((tail, head));
                cells.insert((head, tail));
                for c in cells {
                    *owners.entry(c).or_default() += 1;
                }
            }
            cell_collisions += owners.values().filter(|&&n| n > 1).count();
        }
        Self {
            sentences: sentences.len(),
            entities: sentences.iter().map(|s| s.entities.len()).sum(),
            entity_types: types.len(),
            type_names: types.into_iter().map(String::from).collect(),
            characters: sentences.iter().map(|s| s.len()).sum(),
            max_len: sentences.iter().map(|s| s.len()).max().unwrap_or(0),
            cell_collisions,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.to_path_buf(), source }
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<Sentence>, CorpusError> {
    let file = File::open(path).map_err(io_err(path))?;
    let reader = BufReader::new(file);
    match format {
        CorpusFormat::Jsonl => read_jsonl(reader, path),
        CorpusFormat::Conll => read_conll(reader, path),
    }
}

fn read_jsonl(reader: impl BufRead, path: &Path) -> Result<Vec<Sentence>, CorpusError> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let sentence: Sentence = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            path: path.to_path_buf(),
            line: lineno,
            message: e.to_string(),
        })?;
        if sentence.is_empty() {
            return Err(CorpusError::EmptySentence { path: path.to_path_buf(), line: lineno });
        }
        for e in &sentence.entities {
            if let Some(&index) = e.indices.iter().find(|&&i| i >= sentence.len()) {
                return Err(CorpusError::IndexOutOfRange {
                    path: path.to_path_buf(),
                    line: lineno,
                    index,
                    len: sentence.len(),
                });
            }
            e.check(sentence.len()).map_err(|message| CorpusError::Malformed {
                path: path.to_path_buf(),
                line: lineno,
                message,
            })?;
        }
        out.push(sentence);
    }
    Ok(out)
}

#[derive(Debug, PartialEq, Eq)]
enum Label<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
    End(&'a str),
    Single(&'a str),
}

fn parse_label(label: &str) -> Option<Label<'_>> {
    if label == "O" {
        return Some(Label::Outside);
    }
    let (prefix, ty) = label.split_once('-')?;
    if ty.is_empty() {
        return None;
    }
    match prefix {
        "B" => Some(Label::Begin(ty)),
        "I" | "M" => Some(Label::Inside(ty)),
        "E" => Some(Label::End(ty)),
        "S" => Some(Label::Single(ty)),
        _ => None,
    }
}

/// Decodes a BIO or BMES label sequence into entity mentions. Stray `I`/`M`/`E`
/// labels open a new entity, as conlleval does.
pub fn labels_to_entities(labels: &[&str]) -> Result<Vec<EntityMention>, String> {
    let mut out = Vec::new();
    let mut current: Option<(Vec<usize>, &str)> = None;
    for (i, raw) in labels.iter().enumerate() {
        let label = parse_label(raw).ok_or_else(|| format!("unrecognized label {raw:?}"))?;
        match label {
            Label::Outside => {
                if let Some((idx, ty)) = current.take() {
                    out.push(EntityMention::new(idx, ty));
                }
            }
            Label::Begin(ty) | Label::Single(ty) => {
                if let Some((idx, t)) = current.take() {
                    out.push(EntityMention::new(idx, t));
                }
                if matches!(label, Label::Single(_)) {
                    out.push(EntityMention::new(vec![i], ty));
                } else {
                    current = Some((vec![i], ty));
                }
            }
            Label::Inside(ty) | Label::End(ty) => {
                match &mut current {
                    Some((idx, t)) if *t == ty => idx.push(i),
                    _ => {
                        if let Some((idx, t)) = current.take() {
                            out.push(EntityMention::new(idx, t));
                        }
                        current = Some((vec![i], ty));
                    }
                }
                if matches!(label, Label::End(_)) {
                    if let Some((idx, t)) = current.take() {
                        out.push(EntityMention::new(idx, t));
                    }
                }
            }
        }
    }
    if let Some((idx, ty)) = current {
        out.push(EntityMention::new(idx, ty));
    }
    Ok(out)
}

fn read_conll(reader: impl BufRead, path: &Path) -> Result<Vec<Sentence>, CorpusError> {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("conll").to_string();
    let mut out = Vec::new();
    let mut chars: Vec<String> = Vec::new();
    let mut labels: Vec<String> = Vec::new();
    let mut start_line = 1;

    let mut flush = |chars: &mut Vec<String>, labels: &mut Vec<String>, start: usize| {
        if chars.is_empty() {
            return Ok(());
        }
        let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
        let entities = labels_to_entities(&refs).map_err(|message| CorpusError::Malformed {
            path: path.to_path_buf(),
            line: start,
            message,
        })?;
        out.push(Sentence { id: format!("{stem}-{}", out.len()), chars: std::mem::take(chars), entities });
        labels.clear();
        Ok(())
    };

    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(io_err(path))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            flush(&mut chars, &mut labels, start_line)?;
            start_line = lineno + 1;
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(CorpusError::UnknownLayout { path: path.to_path_buf(), line: lineno, fields: fields.len() });
        }
        if parse_label(fields[1]).is_none() {
            return Err(CorpusError::Malformed {
                path: path.to_path_buf(),
                line: lineno,
                message: format!("unrecognized label {:?}", fields[1]),
            });
        }
        chars.push(fields[0].to_string());
        labels.push(fields[1].to_string());
    }
    flush(&mut chars, &mut labels, start_line)?;
    Ok(out)
}

pub fn write_jsonl(path: &Path, sentences: &[Sentence]) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for s in sentences {
        let line = serde_json::to_string(s).expect("sentence serializes");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// BIO labels for contiguous, non-overlapping entities; used by the conll
/// exporter. Returns `None` when an entity cannot be expressed in BIO.
pub fn entities_to_bio(sentence: &Sentence) -> Option<Vec<String>> {
    let mut labels = vec!["O".to_string(); sentence.len()];
    for e in &sentence.entities {
        if !e.is_contiguous() || e.indices.iter().any(|&i| labels[i] != "O") {
            return None;
        }
        for (k, &i) in e.indices.iter().enumerate() {
            let prefix = if k == 0 { "B" } else { "I" };
            labels[i] = format!("{prefix}-{}", e.entity_type);
        }
    }
    Some(labels)
}

pub fn write_conll(path: &Path, sentences: &[Sentence]) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for s in sentences {
        let labels = entities_to_bio(s).ok_or_else(|| CorpusError::InvalidEntity {
            id: s.id.clone(),
            message: "entities are not expressible as BIO".into(),
        })?;
        for (c, l) in s.chars.iter().zip(&labels) {
            writeln!(w, "{c}\t{l}").map_err(io_err(path))?;
        }
        writeln!(w).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TagId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    None,
    Nnc,
    Pnc,
    /// Tail-head link, indexed into `TagVocabulary::entity_types`.
    Thc(usize),
    /// Head-tail link.
    Htc(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagVocabulary {
    pub entity_types: Vec<String>,
    pub none_is_implicit: bool,
}

impl TagVocabulary {
    pub fn new(entity_types: Vec<String>, none_is_implicit: bool) -> Self {
        Self { entity_types, none_is_implicit }
    }

    /// Types are the sorted distinct labels found in the corpus.
    pub fn build(sentences: &[Sentence]) -> Self {
        let types: BTreeSet<&str> =
            sentences.iter().flat_map(|s| s.entities.iter().map(|e| e.entity_type.as_str())).collect();
        Self::new(types.into_iter().map(String::from).collect(), true)
    }

    pub fn with_explicit_none(&self) -> Self {
        Self { entity_types: self.entity_types.clone(), none_is_implicit: false }
    }

    fn offset(&self) -> usize {
        usize::from(!self.none_is_implicit)
    }

    pub fn num_types(&self) -> usize {
        self.entity_types.len()
    }

    pub fn len(&self) -> usize {
        self.offset() + 2 + 2 * self.num_types()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tags(&self) -> Vec<Tag> {
        (0..self.len()).map(|i| self.tag(TagId(i))).collect()
    }

    pub fn tag(&self, id: TagId) -> Tag {
        let m = self.num_types();
        let i = id.0;
        if !self.none_is_implicit && i == 0 {
            return Tag::None;
        }
        match i - self.offset() {
            0 => Tag::Nnc,
            1 => Tag::Pnc,
            k if k < 2 + m => Tag::Thc(k - 2),
            k if k < 2 + 2 * m => Tag::Htc(k - 2 - m),
            _ => panic!("tag id {i} out of range"),
        }
    }

    pub fn id(&self, tag: Tag) -> TagId {
        let o = self.offset();
        let m = self.num_types();
        match tag {
            Tag::None => {
                assert!(!self.none_is_implicit, "NONE is implicit in this vocabulary");
                TagId(0)
            }
            Tag::Nnc => TagId(o),
            Tag::Pnc => TagId(o + 1),
            Tag::Thc(t) => TagId(o + 2 + t),
            Tag::Htc(t) => TagId(o + 2 + m + t),
        }
    }

    pub fn none(&self) -> Option<TagId> {
        (!self.none_is_implicit).then_some(TagId(0))
    }

    pub fn nnc(&self) -> TagId {
        self.id(Tag::Nnc)
    }

    pub fn pnc(&self) -> TagId {
        self.id(Tag::Pnc)
    }

    pub fn thc(&self, ty: usize) -> TagId {
        self.id(Tag::Thc(ty))
    }

    pub fn htc(&self, ty: usize) -> TagId {
        self.id(Tag::Htc(ty))
    }

    pub fn type_index(&self, ty: &str) -> Option<usize> {
        self.entity_types.iter().position(|t| t == ty)
    }

    pub fn tag_name(&self, id: TagId) -> String {
        match self.tag(id) {
            Tag::None => "NONE".into(),
            Tag::Nnc => "NNC".into(),
            Tag::Pnc => "PNC".into(),
            Tag::Thc(t) => format!("THC_{}", self.entity_types[t]),
            Tag::Htc(t) => format!("HTC_{}", self.entity_types[t]),
        }
    }

    pub fn parse_tag(&self, name: &str) -> Option<TagId> {
        (0..self.len()).map(TagId).find(|&id| self.tag_name(id) == name)
    }
}

/// Sparse `n × n` grid of tag sets; an absent cell means no relation.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TagGrid {
    pub n: usize,
    pub cells: BTreeMap<(usize, usize), BTreeSet<TagId>>,
}

pub type GoldGrid = TagGrid;

impl TagGrid {
    pub fn new(n: usize) -> Self {
        Self { n, cells: BTreeMap::new() }
    }

    pub fn insert(&mut self, i: usize, j: usize, tag: TagId) {
        assert!(i < self.n && j < self.n, "cell ({i}, {j}) outside {0}x{0} grid", self.n);
        self.cells.entry((i, j)).or_default().insert(tag);
    }

    pub fn contains(&self, i: usize, j: usize, tag: TagId) -> bool {
        self.cells.get(&(i, j)).is_some_and(|s| s.contains(&tag))
    }

    pub fn tags(&self, i: usize, j: usize) -> impl Iterator<Item = TagId> + '_ {
        self.cells.get(&(i, j)).into_iter().flatten().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.values().all(|s| s.is_empty())
    }

    /// Checks that every tag sits in the triangle its direction allows.
    pub fn respects_triangles(&self, vocab: &TagVocabulary) -> bool {
        self.cells.iter().all(|(&(i, j), tags)| {
            tags.iter().all(|&t| match vocab.tag(t) {
                Tag::Nnc => i < j,
                Tag::Pnc => i > j,
                Tag::Thc(_) => i >= j,
                Tag::Htc(_) => i <= j,
                Tag::None => true,
            })
        })
    }
}

pub fn encode_grid(sentence: &Sentence, vocab: &TagVocabulary) -> Result<GoldGrid, CorpusError> {
    sentence.validate()?;
    let mut grid = TagGrid::new(sentence.len());
    for e in &sentence.entities {
        let ty =
            vocab.type_index(&e.entity_type).ok_or_else(|| CorpusError::UnknownEntityType(e.entity_type.clone()))?;
        for w in e.indices.windows(2) {
            grid.insert(w[0], w[1], vocab.nnc());
            grid.insert(w[1], w[0], vocab.pnc());
        }
        let head = e.indices[0];
        let tail = *e.indices.last().expect("validated non-empty");
        grid.insert(tail, head, vocab.thc(ty));
        grid.insert(head, tail, vocab.htc(ty));
    }
    Ok(grid)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GeneratorOptions {
    /// Adds an inner entity of another type inside some multi-character entities.
    pub nested: bool,
    /// Adds a head+tail-only entity over some entities of length ≥ 3.
    pub discontinuous: bool,
}

const FILLER_BASE: u32 = 0x4E00;
const FILLER_COUNT: u32 = 24;
const TYPE_BASE: u32 = 0x4F00;
const TYPE_ALPHABET: u32 = 8;

fn filler_char(rng: &mut ChaCha8Rng) -> String {
    char::from_u32(FILLER_BASE + rng.random_range(0..FILLER_COUNT)).expect("CJK codepoint").to_string()
}

fn type_char(rng: &mut ChaCha8Rng, ty: usize) -> String {
    let cp = TYPE_BASE + ty as u32 * TYPE_ALPHABET + rng.random_range(0..TYPE_ALPHABET);
    char::from_u32(cp).expect("CJK codepoint").to_string()
}

/// Deterministic synthetic corpus. Each type draws its characters from a
/// private alphabet and entities are separated by at least one filler
/// character, so entity boundaries are recoverable from the text alone.
pub fn generate_synthetic_corpus(
    seed: u64,
    count: usize,
    max_len: usize,
    types: &[String],
    options: GeneratorOptions,
) -> Vec<Sentence> {
    assert!(max_len >= 1, "max_len must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let len = rng.random_range(1..=max_len);
        let mut chars = Vec::with_capacity(len);
        let mut entities = Vec::new();
        let mut pos = 0;
        while pos < len {
            if !types.is_empty() && rng.random_bool(0.35) {
                let span = rng.random_range(1..=(len - pos).min(4));
                let ty = rng.random_range(0..types.len());
                let indices: Vec<usize> = (pos..pos + span).collect();
                for _ in 0..span {
                    chars.push(type_char(&mut rng, ty));
                }
                pos += span;
                entities.push(EntityMention::new(indices, types[ty].clone()));
                if pos < len {
                    chars.push(filler_char(&mut rng));
                    pos += 1;
                }
            } else {
                chars.push(filler_char(&mut rng));
                pos += 1;
            }
        }
        let base: Vec<EntityMention> = entities.clone();
        if types.len() > 1 {
            for e in &base {
                let other = |rng: &mut ChaCha8Rng, cur: &str| loop {
                    let t = &types[rng.random_range(0..types.len())];
                    if t != cur {
                        break t.clone();
                    }
                };
                if options.nested && e.indices.len() >= 2 && rng.random_bool(0.5) {
                    let inner = e.indices[..e.indices.len() - 1].to_vec();
                    let ty = other(&mut rng, &e.entity_type);
                    entities.push(EntityMention::new(inner, ty));
                }
                if options.discontinuous && e.indices.len() >= 3 && rng.random_bool(0.5) {
                    let idx = vec![e.indices[0], *e.indices.last().unwrap()];
                    let ty = other(&mut rng, &e.entity_type);
                    entities.push(EntityMention::new(idx, ty));
                }
            }
        }
        out.push(Sentence { id: format!("syn-{seed}-{k}"), chars, entities });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(chars: usize, entities: Vec<EntityMention>) -> Sentence {
        Sentence { id: "t".into(), chars: (0..chars).map(|i| i.to_string()).collect(), entities }
    }

    #[test]
    fn vocabulary_layout() {
        let v = TagVocabulary::new(vec!["A".into(), "B".into()], true);
        let names: Vec<String> = (0..v.len()).map(|i| v.tag_name(TagId(i))).collect();
        assert_eq!(names, ["NNC", "PNC", "THC_A", "THC_B", "HTC_A", "HTC_B"]);
        let e = v.with_explicit_none();
        assert_eq!(e.len(), 7);
        assert_eq!(e.tag_name(TagId(0)), "NONE");
        assert_eq!(e.tag(e.htc(1)), Tag::Htc(1));
        for id in (0..e.len()).map(TagId) {
            assert_eq!(e.id(e.tag(id)), id);
        }
    }

    #[test]
    fn vocabulary_from_corpus() {
        assert_eq!(TagVocabulary::build(&[]).len(), 2);
        let corpus = vec![s(
            3,
            vec![
                EntityMention::new(vec![0], "PER"),
                EntityMention::new(vec![1], "LOC"),
                EntityMention::new(vec![2], "ORG"),
            ],
        )];
        let v = TagVocabulary::build(&corpus);
        assert_eq!(v.entity_types, ["LOC", "ORG", "PER"]);
        assert_eq!(v.len(), 8);
    }

    #[test]
    fn encode_three_character_entity() {
        let v = TagVocabulary::new(vec!["PER".into()], true);
        let g = encode_grid(&s(5, vec![EntityMention::new(vec![1, 2, 3], "PER")]), &v).unwrap();
        let mut expected = TagGrid::new(5);
        expected.insert(1, 2, v.nnc());
        expected.insert(2, 3, v.nnc());
        expected.insert(2, 1, v.pnc());
        expected.insert(3, 2, v.pnc());
        expected.insert(3, 1, v.thc(0));
        expected.insert(1, 3, v.htc(0));
        assert_eq!(g, expected);
        assert!(g.respects_triangles(&v));
    }

    #[test]
    fn encode_single_character_and_empty() {
        let v = TagVocabulary::new(vec!["LOC".into()], true);
        let g = encode_grid(&s(4, vec![EntityMention::new(vec![2], "LOC")]), &v).unwrap();
        assert_eq!(g.cells.len(), 1);
        assert_eq!(g.cells[&(2, 2)], BTreeSet::from([v.thc(0), v.htc(0)]));
        assert!(encode_grid(&s(4, vec![]), &v).unwrap().is_empty());
    }

    #[test]
    fn encode_rejects_unknown_type() {
        let v = TagVocabulary::new(vec!["LOC".into()], true);
        let err = encode_grid(&s(4, vec![EntityMention::new(vec![0], "PER")]), &v).unwrap_err();
        assert!(matches!(err, CorpusError::UnknownEntityType(t) if t == "PER"));
    }

    #[test]
    fn bio_and_bmes_decoding() {
        let bio = labels_to_entities(&["B-PER", "I-PER", "O", "B-LOC", "B-LOC", "I-ORG"]).unwrap();
        assert_eq!(
            bio,
            vec![
                EntityMention::new(vec![0, 1], "PER"),
                EntityMention::new(vec![3], "LOC"),
                EntityMention::new(vec![4], "LOC"),
                EntityMention::new(vec![5], "ORG"),
            ]
        );
        let bmes = labels_to_entities(&["S-A", "B-B", "M-B", "E-B", "O", "E-C"]).unwrap();
        assert_eq!(
            bmes,
            vec![
                EntityMention::new(vec![0], "A"),
                EntityMention::new(vec![1, 2, 3], "B"),
                EntityMention::new(vec![5], "C"),
            ]
        );
        assert!(labels_to_entities(&["X-PER"]).is_err());
    }

    #[test]
    fn jsonl_loading_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.jsonl");
        File::create(&empty).unwrap();
        assert!(load_corpus(&empty, CorpusFormat::Jsonl).unwrap().is_empty());
        assert_eq!(CorpusStats::compute(&[]).sentences, 0);

        let bad = dir.path().join("bad.jsonl");
        let mut f = File::create(&bad).unwrap();
        writeln!(f, r#"{{"id":"a","text":["x","y"],"entities":[]}}"#).unwrap();
        writeln!(f, r#"{{"id":"b","text":["x","y"],"entities":[{{"indices":[1,2],"type":"P"}}]}}"#).unwrap();
        drop(f);
        let err = load_corpus(&bad, CorpusFormat::Jsonl).unwrap_err();
        assert!(matches!(err, CorpusError::IndexOutOfRange { line: 2, index: 2, .. }), "{err}");
        assert!(err.to_string().contains(":2:"));

        let garbage = dir.path().join("garbage.jsonl");
        std::fs::write(&garbage, "{not json}\n").unwrap();
        assert!(matches!(load_corpus(&garbage, CorpusFormat::Jsonl), Err(CorpusError::Malformed { line: 1, .. })));

        let zero = dir.path().join("zero.jsonl");
        std::fs::write(&zero, r#"{"id":"z","text":[],"entities":[]}"#).unwrap();
        assert!(matches!(load_corpus(&zero, CorpusFormat::Jsonl), Err(CorpusError::EmptySentence { .. })));

        let missing = dir.path().join("nope.jsonl");
        assert!(matches!(load_corpus(&missing, CorpusFormat::Jsonl), Err(CorpusError::Io { .. })));
    }

    #[test]
    fn conll_loading_and_layout_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.conll");
        std::fs::write(&p, "北\tB-LOC\n京\tI-LOC\n好\tO\n\n我\tS-PER\n").unwrap();
        let corpus = load_corpus(&p, CorpusFormat::Conll).unwrap();
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus[0].chars, ["北", "京", "好"]);
        assert_eq!(corpus[0].entities, vec![EntityMention::new(vec![0, 1], "LOC")]);
        assert_eq!(corpus[1].entities, vec![EntityMention::new(vec![0], "PER")]);

        let bad = dir.path().join("bad.conll");
        std::fs::write(&bad, "北\tB-LOC\n京\tI-LOC\textra\n").unwrap();
        assert!(matches!(
            load_corpus(&bad, CorpusFormat::Conll),
            Err(CorpusError::UnknownLayout { line: 2, fields: 3, .. })
        ));
    }

    #[test]
    fn synthetic_corpus_is_deterministic() {
        let types = vec!["A".to_string(), "B".to_string()];
        let a = generate_synthetic_corpus(7, 3, 20, &types, GeneratorOptions::default());
        let b = generate_synthetic_corpus(7, 3, 20, &types, GeneratorOptions::default());
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(generate_synthetic_corpus(7, 0, 20, &types, GeneratorOptions::default()).is_empty());
        for s in &a {
            s.validate().unwrap();
            assert!(s.len() <= 20 && !s.is_empty());
        }
    }

    #[test]
    fn synthetic_flags_add_overlapping_entities() {
        let types = vec!["A".to_string(), "B".to_string()];
        let opts = GeneratorOptions { nested: true, discontinuous: true };
        let corpus = generate_synthetic_corpus(3, 200, 30, &types, opts);
        assert!(corpus.iter().flat_map(|s| &s.entities).any(|e| !e.is_contiguous()));
        for s in &corpus {
            s.validate().unwrap();
        }
        assert!(CorpusStats::compute(&corpus).cell_collisions > 0);
    }
}
