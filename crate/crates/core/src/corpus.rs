//! Question/answer corpora and their provenance.
//!
//! Corpora are stored as JSON Lines, one [`Sample`] per line, with the fixed
//! field order `id, question, answer, origin, parent_id, iteration, meta`.
//! A corpus is an immutable value: every constructor validates the
//! invariants and operations that "change" a corpus return a new one.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Seed,
    Synthetic,
}

/// One question/answer pair. The answer may embed chain-of-thought.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub origin: Origin,
    #[serde(default)]
    pub parent_id: Option<String>,
    #[serde(default)]
    pub iteration: u32,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl Sample {
    pub fn seed(
        id: impl Into<String>,
        question: impl Into<String>,
        answer: impl Into<String>,
    ) -> Self {
        Sample {
            id: id.into(),
            question: question.into(),
            answer: answer.into(),
            origin: Origin::Seed,
            parent_id: None,
            iteration: 0,
            meta: BTreeMap::new(),
        }
    }

    pub fn synthetic(
        id: impl Into<String>,
        question: impl Into<String>,
        answer: impl Into<String>,
        parent_id: impl Into<String>,
        iteration: u32,
    ) -> Self {
        Sample {
            id: id.into(),
            question: question.into(),
            answer: answer.into(),
            origin: Origin::Synthetic,
            parent_id: Some(parent_id.into()),
            iteration,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.meta.insert(key.into(), value.into());
        self
    }

    fn check(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::validation("sample with empty id"));
        }
        match self.origin {
            Origin::Seed if self.parent_id.is_some() => Err(Error::validation(format!(
                "seed sample {:?} must not carry a parent_id",
                self.id
            ))),
            Origin::Seed if self.iteration != 0 => Err(Error::validation(format!(
                "seed sample {:?} must have iteration 0",
                self.id
            ))),
            Origin::Synthetic if self.parent_id.is_none() => Err(Error::validation(format!(
                "synthetic sample {:?} is missing parent_id",
                self.id
            ))),
            _ => Ok(()),
        }
    }
}

/// Deterministic id for the `counter`-th synthetic sample of an iteration.
pub fn synthetic_id(iteration: u32, counter: usize) -> String {
    format!("synth-{iteration}-{counter}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusRole {
    Seed,
    Selected,
    Synthetic,
    Validation,
    Test,
}

impl fmt::Display for CorpusRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CorpusRole::Seed => "seed",
            CorpusRole::Selected => "selected",
            CorpusRole::Synthetic => "synthetic",
            CorpusRole::Validation => "validation",
            CorpusRole::Test => "test",
        };
        f.write_str(s)
    }
}

/// A role-tagged, ordered collection of samples with unique ids.
#[derive(Debug, Clone)]
pub struct Corpus {
    role: CorpusRole,
    samples: Vec<Sample>,
    created_at_iteration: u32,
    index: HashMap<String, usize>,
}

impl PartialEq for Corpus {
    fn eq(&self, other: &Self) -> bool {
        self.role == other.role
            && self.samples == other.samples
            && self.created_at_iteration == other.created_at_iteration
    }
}

impl Corpus {
    /// Builds a corpus, validating every invariant. `created_at_iteration`
    /// is the largest sample iteration (0 for an empty corpus).
    pub fn new(role: CorpusRole, samples: Vec<Sample>) -> Result<Self> {
        if role == CorpusRole::Seed && samples.is_empty() {
            return Err(Error::validation("seed corpus must be non-empty"));
        }
        let mut index = HashMap::with_capacity(samples.len());
        for (pos, s) in samples.iter().enumerate() {
            s.check()?;
            match role {
                CorpusRole::Synthetic if s.origin != Origin::Synthetic => {
                    return Err(Error::validation(format!(
                        "synthetic corpus holds non-synthetic sample {:?}",
                        s.id
                    )))
                }
                CorpusRole::Seed
                | CorpusRole::Validation
                | CorpusRole::Test
                | CorpusRole::Selected
                    if s.origin != Origin::Seed =>
                {
                    return Err(Error::validation(format!(
                        "{role} corpus holds synthetic sample {:?}",
                        s.id
                    )))
                }
                _ => {}
            }
            if index.insert(s.id.clone(), pos).is_some() {
                return Err(Error::validation(format!("duplicate sample id {:?}", s.id)));
            }
        }
        let created_at_iteration = samples.iter().map(|s| s.iteration).max().unwrap_or(0);
        Ok(Corpus {
            role,
            samples,
            created_at_iteration,
            index,
        })
    }

    pub fn empty(role: CorpusRole) -> Result<Self> {
        Corpus::new(role, Vec::new())
    }

    /// The selected subset D̄ₜ: the seed samples with the given ids, in the
    /// given order.
    pub fn selected_from(seed: &Corpus, ids: &[String]) -> Result<Self> {
        let samples = ids
            .iter()
            .map(|id| {
                seed.get(id).cloned().ok_or_else(|| {
                    Error::validation(format!("selected id {id:?} is not in the seed corpus"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Corpus::new(CorpusRole::Selected, samples)
    }

    pub fn role(&self) -> CorpusRole {
        self.role
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn created_at_iteration(&self) -> u32 {
        self.created_at_iteration
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.index.get(id).map(|&i| &self.samples[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.id.as_str())
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Sample> {
        self.samples.iter()
    }

    pub fn into_samples(self) -> Vec<Sample> {
        self.samples
    }
}

impl<'a> IntoIterator for &'a Corpus {
    type Item = &'a Sample;
    type IntoIter = std::slice::Iter<'a, Sample>;

    fn into_iter(self) -> Self::IntoIter {
        self.samples.iter()
    }
}

/// Reads a JSON Lines corpus. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn load_corpus(path: impl AsRef<Path>, role: CorpusRole) -> Result<Corpus> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        samples.push(sample);
    }
    Corpus::new(role, samples)
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(path, corpus.samples())
}

/// Writes any serializable records as JSON Lines (one compact object per
/// line, trailing newline).
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::Protocol(e.to_string()))?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// D̂ₜ := D̂ₜ ∪ D̂ₜ₋₁, previous samples first.
pub fn merge_accumulate(current: &Corpus, previous: &Corpus) -> Result<Corpus> {
    for c in [current, previous] {
        if c.role() != CorpusRole::Synthetic {
            return Err(Error::validation(format!(
                "merge_accumulate expects synthetic corpora, got {}",
                c.role()
            )));
        }
    }
    if let Some(dup) = current.ids().find(|id| previous.contains(id)) {
        return Err(Error::validation(format!(
            "corpora share sample id {dup:?}"
        )));
    }
    let samples = previous
        .samples()
        .iter()
        .chain(current.samples())
        .cloned()
        .collect();
    Corpus::new(CorpusRole::Synthetic, samples)
}

/// Links an exemplar from the seed corpus to the synthetic sample it
/// produced, together with the scores used for the fidelity analyses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub parent_id: String,
    pub child_id: String,
    pub iteration: u32,
    pub selection_score: Option<f64>,
    pub scorer_kind: String,
    /// Score of the child under the same student and scorer.
    #[serde(default)]
    pub child_score: Option<f64>,
    /// Whether that student answered the child question correctly.
    #[serde(default)]
    pub child_correct: Option<bool>,
}

/// Every record must resolve its parent in `seed` and its child in one of
/// the `synthetic` corpora.
pub fn check_provenance(
    records: &[GenerationRecord],
    seed: &Corpus,
    synthetic: &[&Corpus],
) -> Result<()> {
    let children: HashSet<&str> = synthetic.iter().flat_map(|c| c.ids()).collect();
    for r in records {
        if !seed.contains(&r.parent_id) {
            return Err(Error::validation(format!(
                "generation record parent {:?} not in seed corpus",
                r.parent_id
            )));
        }
        if !children.contains(r.child_id.as_str()) {
            return Err(Error::validation(format!(
                "generation record child {:?} not in any synthetic corpus",
                r.child_id
            )));
        }
    }
    Ok(())
}
