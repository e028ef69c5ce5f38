//! Demonstration pools and query problems.
//!
//! Ingests benchmark files (MBPP- and HumanEval-style JSONL plus a native
//! interchange schema), validates records, and generates deterministic
//! synthetic corpora for desk-scale experiments. Records that fail
//! validation are skipped with logged diagnostics; only a load that yields
//! zero valid records is fatal.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// One (natural-language prompt, golden code, unit tests) record; the atom
/// of the demonstration pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DemonstrationPair {
    pub task_id: String,
    pub prompt_text: String,
    pub golden_code: String,
    pub tests: Vec<String>,
    pub language_tag: String,
}

impl DemonstrationPair {
    /// Canonical single-line JSON in the native schema. Used for content
    /// hashing and for the native interchange format.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(&NativeRecord::from(self)).expect("record serializes")
    }

    /// Digest of the canonical encoding; used as a cache key component.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    fn validate(&self) -> Result<(), String> {
        if self.task_id.is_empty() {
            return Err("empty task_id".into());
        }
        if self.prompt_text.is_empty() {
            return Err("empty prompt text".into());
        }
        if self.golden_code.is_empty() {
            return Err("empty golden code".into());
        }
        if self.tests.is_empty() {
            return Err("empty test list".into());
        }
        Ok(())
    }
}

/// Native JSONL schema. Keys are part of the on-disk contract.
#[derive(Debug, Serialize, Deserialize)]
struct NativeRecord {
    task_id: String,
    prompt: String,
    solution: String,
    tests: Vec<String>,
    language: String,
}

impl From<&DemonstrationPair> for NativeRecord {
    fn from(pair: &DemonstrationPair) -> Self {
        NativeRecord {
            task_id: pair.task_id.clone(),
            prompt: pair.prompt_text.clone(),
            solution: pair.golden_code.clone(),
            tests: pair.tests.clone(),
            language: pair.language_tag.clone(),
        }
    }
}

impl From<NativeRecord> for DemonstrationPair {
    fn from(rec: NativeRecord) -> Self {
        DemonstrationPair {
            task_id: rec.task_id,
            prompt_text: rec.prompt,
            golden_code: rec.solution,
            tests: rec.tests,
            language_tag: rec.language,
        }
    }
}

/// Upstream MBPP-style record (`text`/`code`/`test_list` keys).
#[derive(Debug, Deserialize)]
struct MbppRecord {
    task_id: serde_json::Value,
    text: String,
    code: String,
    test_list: Vec<String>,
}

/// Upstream HumanEval-style record (`prompt`/`canonical_solution`/`test`/
/// `entry_point` keys).
#[derive(Debug, Deserialize)]
struct HumanevalRecord {
    task_id: String,
    prompt: String,
    canonical_solution: String,
    test: String,
    entry_point: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceFormat {
    Mbpp,
    Humaneval,
    Native,
    Synthetic,
}

impl fmt::Display for SourceFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SourceFormat::Mbpp => "mbpp",
            SourceFormat::Humaneval => "humaneval",
            SourceFormat::Native => "native",
            SourceFormat::Synthetic => "synthetic",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for SourceFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mbpp" => Ok(SourceFormat::Mbpp),
            "humaneval" => Ok(SourceFormat::Humaneval),
            "native" => Ok(SourceFormat::Native),
            "synthetic" => Ok(SourceFormat::Synthetic),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }
}

/// An ordered, content-addressed collection of demonstration pairs.
///
/// Record order is stable across loads: byte-identical input yields an
/// identical sequence and `content_hash`.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub name: String,
    pub records: Vec<DemonstrationPair>,
    pub source_format: SourceFormat,
    pub content_hash: String,
}

impl DatasetManifest {
    pub fn new(name: &str, records: Vec<DemonstrationPair>, source_format: SourceFormat) -> Self {
        let content_hash = hash_records(&records);
        DatasetManifest {
            name: name.to_string(),
            records,
            source_format,
            content_hash,
        }
    }

    pub fn task_ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.task_id.as_str())
    }

    pub fn find(&self, task_id: &str) -> Option<&DemonstrationPair> {
        self.records.iter().find(|r| r.task_id == task_id)
    }
}

fn hash_records(records: &[DemonstrationPair]) -> String {
    let mut hasher = Sha256::new();
    for rec in records {
        hasher.update(rec.canonical_json().as_bytes());
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}

/// A record that was rejected during load, with enough context to find it
/// in the source file.
#[derive(Debug, Clone, Serialize)]
pub struct RecordError {
    /// 1-based line number in the source file.
    pub line: usize,
    /// Task identifier when one could be parsed out of the record.
    pub task_id: Option<String>,
    pub message: String,
}

impl fmt::Display for RecordError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.task_id {
            Some(id) => write!(f, "line {} (task {}): {}", self.line, id, self.message),
            None => write!(f, "line {}: {}", self.line, self.message),
        }
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown dataset format {0:?}")]
    UnknownFormat(String),
    #[error("zero valid records in {path} ({} rejected)", rejected.len())]
    NoValidRecords {
        path: String,
        rejected: Vec<RecordError>,
    },
    #[error("unknown task ids in query set: {0:?}")]
    UnknownQueryIds(Vec<String>),
    #[error("invalid synthetic spec: {0}")]
    InvalidSyntheticSpec(String),
}

/// Result of a dataset load: the manifest plus any records that were
/// rejected and skipped.
#[derive(Debug)]
pub struct LoadOutcome {
    pub manifest: DatasetManifest,
    pub record_errors: Vec<RecordError>,
}

/// Load a dataset file, normalizing the upstream schema into
/// [`DemonstrationPair`] records.
///
/// Field mapping per adapter: mbpp `text`→prompt, `code`→solution,
/// `test_list`→tests; humaneval `prompt`→prompt, `canonical_solution`→
/// solution, `test`+`entry_point`→tests. Invalid records are skipped and
/// reported; a load with zero valid records is fatal.
pub fn load_dataset(path: &Path, format: SourceFormat) -> Result<LoadOutcome, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;

    let mut records = Vec::new();
    let mut errors = Vec::new();
    let mut seen_ids = BTreeSet::new();

    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        if raw_line.trim().is_empty() {
            continue;
        }
        match parse_record(raw_line, format) {
            Ok(pair) => {
                if let Err(message) = pair.validate() {
                    errors.push(RecordError {
                        line,
                        task_id: Some(pair.task_id.clone()),
                        message,
                    });
                } else if !seen_ids.insert(pair.task_id.clone()) {
                    errors.push(RecordError {
                        line,
                        task_id: Some(pair.task_id.clone()),
                        message: "duplicate task_id".into(),
                    });
                } else {
                    records.push(pair);
                }
            }
            Err(message) => errors.push(RecordError {
                line,
                task_id: None,
                message,
            }),
        }
    }

    for err in &errors {
        log::warn!("{}: skipped record: {}", path.display(), err);
    }
    if records.is_empty() {
        return Err(CorpusError::NoValidRecords {
            path: path.display().to_string(),
            rejected: errors,
        });
    }

    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    Ok(LoadOutcome {
        manifest: DatasetManifest::new(&name, records, format),
        record_errors: errors,
    })
}

fn parse_record(line: &str, format: SourceFormat) -> Result<DemonstrationPair, String> {
    match format {
        SourceFormat::Native | SourceFormat::Synthetic => {
            let rec: NativeRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
            Ok(rec.into())
        }
        SourceFormat::Mbpp => {
            let rec: MbppRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
            let task_id = match &rec.task_id {
                serde_json::Value::String(s) => s.clone(),
                serde_json::Value::Number(n) => n.to_string(),
                other => return Err(format!("unsupported task_id value {other}")),
            };
            Ok(DemonstrationPair {
                task_id,
                prompt_text: rec.text,
                golden_code: rec.code,
                tests: rec.test_list,
                language_tag: "python".into(),
            })
        }
        SourceFormat::Humaneval => {
            let rec: HumanevalRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
            Ok(DemonstrationPair {
                task_id: rec.task_id,
                prompt_text: rec.prompt,
                golden_code: rec.canonical_solution,
                // The harness text defines check(); the second snippet
                // invokes it against the declared entry point.
                tests: vec![rec.test, format!("check({})", rec.entry_point)],
                language_tag: "python".into(),
            })
        }
    }
}

/// Write a manifest in the native JSONL schema, one record per line.
pub fn write_native(manifest: &DatasetManifest, path: &Path) -> Result<(), CorpusError> {
    let mut out = String::new();
    for rec in &manifest.records {
        out.push_str(&rec.canonical_json());
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Partition a manifest into a demonstration pool and a query set.
///
/// A query is never its own candidate demonstration: the two halves are
/// disjoint and together cover all records, in manifest order.
pub fn split_pool_query(
    manifest: &DatasetManifest,
    query_ids: &BTreeSet<String>,
) -> Result<(Vec<DemonstrationPair>, Vec<DemonstrationPair>), CorpusError> {
    let known: BTreeSet<&str> = manifest.task_ids().collect();
    let unknown: Vec<String> = query_ids
        .iter()
        .filter(|id| !known.contains(id.as_str()))
        .cloned()
        .collect();
    if !unknown.is_empty() {
        return Err(CorpusError::UnknownQueryIds(unknown));
    }

    let mut pool = Vec::new();
    let mut queries = Vec::new();
    for rec in &manifest.records {
        if query_ids.contains(&rec.task_id) {
            queries.push(rec.clone());
        } else {
            pool.push(rec.clone());
        }
    }
    Ok((pool, queries))
}

/// Built-in synthetic task families. Each family has a distinct prompt and
/// solution shape so that family membership is recoverable from content.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    ReverseString,
    AddIntegers,
    MaxOfList,
    CountVowels,
}

impl TaskFamily {
    /// Short label used as the task_id prefix; doubles as the hidden family
    /// label for retrieval experiments.
    pub fn slug(&self) -> &'static str {
        match self {
            TaskFamily::ReverseString => "rev",
            TaskFamily::AddIntegers => "add",
            TaskFamily::MaxOfList => "max",
            TaskFamily::CountVowels => "vow",
        }
    }

    fn generate(&self, rng: &mut ChaCha8Rng) -> (String, String, Vec<String>) {
        match self {
            TaskFamily::ReverseString => {
                let word = random_word(rng, 3, 6);
                let rev: String = word.chars().rev().collect();
                (
                    format!("reverse the string '{word}' and return the result"),
                    "def solve(s):\n    return s[::-1]\n".to_string(),
                    vec![
                        format!("assert solve('{word}') == '{rev}'"),
                        "assert solve('ab') == 'ba'".to_string(),
                    ],
                )
            }
            TaskFamily::AddIntegers => {
                let a: i64 = rng.random_range(2..=97);
                let b: i64 = rng.random_range(2..=97);
                (
                    format!("add the integers {a} and {b} and return their sum"),
                    "def solve(x, y):\n    return x + y\n".to_string(),
                    vec![
                        format!("assert solve({a}, {b}) == {}", a + b),
                        "assert solve(1, 2) == 3".to_string(),
                    ],
                )
            }
            TaskFamily::MaxOfList => {
                let xs: Vec<i64> = (0..4).map(|_| rng.random_range(1..=99)).collect();
                let max = *xs.iter().max().expect("nonempty");
                let list = xs
                    .iter()
                    .map(|x| x.to_string())
                    .collect::<Vec<_>>()
                    .join(", ");
                (
                    format!("return the largest number in the list [{list}]"),
                    "def solve(xs):\n    return max(xs)\n".to_string(),
                    vec![
                        format!("assert solve([{list}]) == {max}"),
                        "assert solve([1, 2]) == 2".to_string(),
                    ],
                )
            }
            TaskFamily::CountVowels => {
                let word = random_word(rng, 4, 7);
                let count = word.chars().filter(|c| "aeiou".contains(*c)).count();
                (
                    format!("count the vowels in the string '{word}'"),
                    "def solve(s):\n    return sum(1 for ch in s if ch in 'aeiou')\n".to_string(),
                    vec![
                        format!("assert solve('{word}') == {count}"),
                        "assert solve('aeiou') == 5".to_string(),
                    ],
                )
            }
        }
    }
}

fn random_word(rng: &mut ChaCha8Rng, min_len: usize, max_len: usize) -> String {
    let len = rng.random_range(min_len..=max_len);
    (0..len)
        .map(|_| (b'a' + rng.random_range(0..26u8)) as char)
        .collect()
}

/// Generator parameters for a synthetic corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub families: Vec<TaskFamily>,
    pub per_family: usize,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<(), CorpusError> {
        let distinct: BTreeSet<&str> = self.families.iter().map(|f| f.slug()).collect();
        if distinct.len() < 2 {
            return Err(CorpusError::InvalidSyntheticSpec(format!(
                "need at least 2 distinct task families, got {}",
                distinct.len()
            )));
        }
        if distinct.len() != self.families.len() {
            return Err(CorpusError::InvalidSyntheticSpec(
                "family list contains duplicates".into(),
            ));
        }
        if self.per_family == 0 {
            return Err(CorpusError::InvalidSyntheticSpec(
                "per_family must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Generate a deterministic synthetic corpus.
///
/// Each record's task_id carries its family slug as a prefix, and every
/// golden solution passes its own tests under the execution sandbox.
pub fn build_synthetic_corpus(
    spec: &SyntheticSpec,
    seed: u64,
) -> Result<DatasetManifest, CorpusError> {
    spec.validate()?;
    let mut records = Vec::new();
    for family in &spec.families {
        // Per-family stream so adding a family never reshuffles the others.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ family_stream_id(family.slug()));
        for i in 0..spec.per_family {
            let (prompt_text, golden_code, tests) = family.generate(&mut rng);
            records.push(DemonstrationPair {
                task_id: format!("{}-{i:04}", family.slug()),
                prompt_text,
                golden_code,
                tests,
                language_tag: "python".into(),
            });
        }
    }
    Ok(DatasetManifest::new(
        "synthetic",
        records,
        SourceFormat::Synthetic,
    ))
}

fn family_stream_id(slug: &str) -> u64 {
    let digest = Sha256::digest(slug.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Family slug of a synthetic task_id ("rev-0003" → "rev").
pub fn family_of(task_id: &str) -> Option<&str> {
    task_id.split('-').next().filter(|s| !s.is_empty())
}
