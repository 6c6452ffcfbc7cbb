//! Admission records: JSON-lines ingestion, frequency-filtered vocabularies,
//! indexing, train/test splitting, negative sampling and summary statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One admission as read from disk, before vocabulary filtering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawAdmission {
    pub admission_id: String,
    #[serde(rename = "diseases", default)]
    pub disease_codes: Vec<String>,
    #[serde(rename = "procedures", default)]
    pub procedure_codes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodeKind {
    Disease,
    Procedure,
}

impl CodeKind {
    pub fn name(self) -> &'static str {
        match self {
            CodeKind::Disease => "disease",
            CodeKind::Procedure => "procedure",
        }
    }

    fn codes(self, record: &RawAdmission) -> &[String] {
        match self {
            CodeKind::Disease => &record.disease_codes,
            CodeKind::Procedure => &record.procedure_codes,
        }
    }
}

/// Bijection between code strings and dense indices, ordered lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeVocabulary {
    kind: CodeKind,
    codes: Vec<String>,
    index_of: HashMap<String, usize>,
}

impl CodeVocabulary {
    /// Builds a vocabulary from codes given in index order.
    pub fn from_codes(kind: CodeKind, codes: Vec<String>) -> Result<Self> {
        if codes.is_empty() {
            return Err(Error::EmptyVocabulary(kind.name()));
        }
        let mut index_of = HashMap::with_capacity(codes.len());
        for (i, code) in codes.iter().enumerate() {
            if index_of.insert(code.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate {} code {code:?} in vocabulary",
                    kind.name()
                )));
            }
        }
        Ok(Self {
            kind,
            codes,
            index_of,
        })
    }

    pub fn kind(&self) -> CodeKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn index_of(&self, code: &str) -> Option<usize> {
        self.index_of.get(code).copied()
    }

    pub fn code(&self, index: usize) -> Option<&str> {
        self.codes.get(index).map(String::as_str)
    }

    /// Vocabulary file: one code per line, line number is the index.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        for code in &self.codes {
            writeln!(out, "{code}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(kind: CodeKind, input: R) -> Result<Self> {
        let mut codes = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            let code = line.trim_end_matches('\r');
            if code.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "empty code in vocabulary file".into(),
                });
            }
            codes.push(code.to_string());
        }
        Self::from_codes(kind, codes)
    }
}

/// An indexed admission: sorted, deduplicated disease and positive-procedure sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Admission {
    pub id: String,
    pub diseases: Vec<usize>,
    pub positives: Vec<usize>,
}

impl Admission {
    /// Maps indices back to code strings.
    pub fn to_raw(&self, dvocab: &CodeVocabulary, pvocab: &CodeVocabulary) -> RawAdmission {
        RawAdmission {
            admission_id: self.id.clone(),
            disease_codes: self
                .diseases
                .iter()
                .map(|&d| dvocab.codes[d].clone())
                .collect(),
            procedure_codes: self
                .positives
                .iter()
                .map(|&p| pvocab.codes[p].clone())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetStats {
    pub admission_count: usize,
    pub disease_vocab_size: usize,
    pub procedure_vocab_size: usize,
    pub diseases_per_admission_hist: BTreeMap<usize, usize>,
    pub procedures_per_admission_hist: BTreeMap<usize, usize>,
}

/// Reads one JSON object per nonblank line.
pub fn parse_admissions<R: BufRead>(input: R) -> Result<Vec<RawAdmission>> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RawAdmission = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if record.admission_id.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "admission_id is empty".into(),
            });
        }
        if !seen.insert(record.admission_id.clone()) {
            return Err(Error::DuplicateAdmission {
                id: record.admission_id,
                line: line_no,
            });
        }
        records.push(record);
    }
    Ok(records)
}

/// Writes records in the same JSON-lines format `parse_admissions` reads.
pub fn write_admissions<W: Write>(records: &[RawAdmission], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Keeps codes of `kind` occurring at least `min_count` times over the raw records.
///
/// Occurrences are counted per listing, before any record is dropped for being
/// empty after filtering.
pub fn build_vocabulary(
    records: &[RawAdmission],
    kind: CodeKind,
    min_count: usize,
) -> Result<CodeVocabulary> {
    if min_count == 0 {
        return Err(Error::InvalidArgument("min_count must be at least 1".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in records {
        for code in kind.codes(r) {
            *counts.entry(code.as_str()).or_default() += 1;
        }
    }
    let mut codes: Vec<String> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_count)
        .map(|(code, _)| code.to_string())
        .collect();
    codes.sort_unstable();
    CodeVocabulary::from_codes(kind, codes)
}

fn index_set(codes: &[String], vocab: &CodeVocabulary) -> Vec<usize> {
    codes
        .iter()
        .filter_map(|c| vocab.index_of(c))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Drops out-of-vocabulary codes and discards records left without diseases or procedures.
pub fn index_and_filter(
    records: &[RawAdmission],
    dvocab: &CodeVocabulary,
    pvocab: &CodeVocabulary,
) -> Vec<Admission> {
    records
        .iter()
        .filter_map(|r| {
            let diseases = index_set(&r.disease_codes, dvocab);
            let positives = index_set(&r.procedure_codes, pvocab);
            (!diseases.is_empty() && !positives.is_empty()).then(|| Admission {
                id: r.admission_id.clone(),
                diseases,
                positives,
            })
        })
        .collect()
}

/// Seeded shuffle, then the last `floor(test_fraction * N)` records become the test set.
pub fn split_train_test<R: Rng>(
    records: &[Admission],
    test_fraction: f64,
    rng: &mut R,
) -> Result<(Vec<Admission>, Vec<Admission>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidSplit(format!(
            "test fraction {test_fraction} not in (0, 1)"
        )));
    }
    let n = records.len();
    let n_test = (test_fraction * n as f64).floor() as usize;
    if n_test == 0 || n_test == n {
        return Err(Error::InvalidSplit(format!(
            "fraction {test_fraction} of {n} records leaves an empty train or test set"
        )));
    }
    let mut shuffled = records.to_vec();
    shuffled.shuffle(rng);
    let test = shuffled.split_off(n - n_test);
    Ok((shuffled, test))
}

/// Draws `min(|P+|, |P| - |P+|)` distinct procedures outside the positive set.
pub fn sample_negatives<R: Rng>(
    admission: &Admission,
    procedure_vocab_size: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let positives = &admission.positives;
    if let Some(&p) = positives.iter().find(|&&p| p >= procedure_vocab_size) {
        return Err(Error::IndexOutOfRange {
            what: "procedure",
            index: p,
            size: procedure_vocab_size,
        });
    }
    let complement_size = procedure_vocab_size - positives.len();
    if complement_size == 0 {
        return Err(Error::EmptyComplement(procedure_vocab_size));
    }
    let want = positives.len().min(complement_size);
    // Sample ranks within the complement, then map each rank past the sorted positives.
    let mut negatives: Vec<usize> = rand::seq::index::sample(rng, complement_size, want)
        .into_iter()
        .map(|rank| {
            let mut idx = rank;
            for &p in positives {
                if p <= idx {
                    idx += 1;
                } else {
                    break;
                }
            }
            idx
        })
        .collect();
    negatives.sort_unstable();
    Ok(negatives)
}

pub fn compute_stats(
    records: &[Admission],
    disease_vocab_size: usize,
    procedure_vocab_size: usize,
) -> DatasetStats {
    let mut stats = DatasetStats {
        admission_count: records.len(),
        disease_vocab_size,
        procedure_vocab_size,
        ..Default::default()
    };
    for r in records {
        *stats
            .diseases_per_admission_hist
            .entry(r.diseases.len())
            .or_default() += 1;
        *stats
            .procedures_per_admission_hist
            .entry(r.positives.len())
            .or_default() += 1;
    }
    stats
}
