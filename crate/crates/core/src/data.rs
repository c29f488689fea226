//! Labeled text records: GLUE-style TSV ingestion, synthetic generation,
//! train/test splitting and hashed bag-of-words featurization.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::seed::{fnv1a64, SeedKey};

pub type ExampleId = u64;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot open {path}: {source}")]
    Open { path: PathBuf, source: std::io::Error },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("tsv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("zero parseable rows requested")]
    ZeroRequested,
    #[error("no parseable rows in input ({skipped} skipped)")]
    NoRows { skipped: usize },
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("duplicate example id {0}")]
    DuplicateId(ExampleId),
    #[error("test fraction {0} outside (0, 1)")]
    BadFraction(f64),
    #[error("split of {n} examples at fraction {fraction} leaves an empty side")]
    DegenerateSplit { n: usize, fraction: f64 },
    #[error("invalid synthetic parameters: {0}")]
    Synth(String),
    #[error("feature dimension {0} is not a power of two")]
    BadDim(usize),
    #[error("token cap must be at least 1")]
    BadTokenCap,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Column bindings and label vocabulary for one task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSchema {
    pub name: String,
    pub text_columns: Vec<String>,
    pub label_column: String,
    /// Raw label strings; the class index is the position in this list.
    pub labels: Vec<String>,
}

impl TaskSchema {
    pub fn new(
        name: impl Into<String>,
        text_columns: Vec<String>,
        label_column: impl Into<String>,
        labels: Vec<String>,
    ) -> Result<Self, DataError> {
        let schema = TaskSchema {
            name: name.into(),
            text_columns,
            label_column: label_column.into(),
            labels,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn sst2() -> Self {
        Self::preset("sst2", &["sentence"], "label", &["0", "1"])
    }

    pub fn qqp() -> Self {
        Self::preset("qqp", &["question1", "question2"], "is_duplicate", &["0", "1"])
    }

    pub fn mnli() -> Self {
        Self::preset(
            "mnli",
            &["premise", "hypothesis"],
            "gold_label",
            &["entailment", "neutral", "contradiction"],
        )
    }

    /// Schema of generated data: one text field, labels `"0".."k-1"`.
    pub fn synthetic(num_classes: usize) -> Self {
        TaskSchema {
            name: "synthetic".into(),
            text_columns: vec!["text".into()],
            label_column: "label".into(),
            labels: (0..num_classes).map(|c| c.to_string()).collect(),
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "sst2" | "sst-2" | "sst" => Some(Self::sst2()),
            "qqp" => Some(Self::qqp()),
            "mnli" => Some(Self::mnli()),
            _ => None,
        }
    }

    fn preset(name: &str, texts: &[&str], label: &str, labels: &[&str]) -> Self {
        TaskSchema {
            name: name.into(),
            text_columns: texts.iter().map(|s| s.to_string()).collect(),
            label_column: label.into(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn num_inputs(&self) -> usize {
        self.text_columns.len()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn label_index(&self, raw: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == raw)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if !(1..=2).contains(&self.num_inputs()) {
            return Err(DataError::Schema(format!("{} text columns; expected 1 or 2", self.num_inputs())));
        }
        if self.num_classes() < 2 {
            return Err(DataError::Schema("at least two classes required".into()));
        }
        let distinct: HashSet<&String> = self.labels.iter().collect();
        if distinct.len() != self.labels.len() {
            return Err(DataError::Schema("label strings must be distinct".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub id: ExampleId,
    pub texts: Vec<String>,
    pub label: usize,
}

/// An ordered, immutable collection of examples with unique ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    schema: TaskSchema,
    examples: Vec<Example>,
}

impl Dataset {
    pub fn new(schema: TaskSchema, examples: Vec<Example>) -> Result<Self, DataError> {
        schema.validate()?;
        let mut seen = HashSet::with_capacity(examples.len());
        for ex in &examples {
            if !seen.insert(ex.id) {
                return Err(DataError::DuplicateId(ex.id));
            }
            if ex.texts.len() != schema.num_inputs() {
                return Err(DataError::Schema(format!(
                    "example {} has {} texts, schema expects {}",
                    ex.id,
                    ex.texts.len(),
                    schema.num_inputs()
                )));
            }
            if ex.label >= schema.num_classes() {
                return Err(DataError::Schema(format!("example {} has label {} out of range", ex.id, ex.label)));
            }
        }
        Ok(Dataset { schema, examples })
    }

    pub fn schema(&self) -> &TaskSchema {
        &self.schema
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn ids(&self) -> Vec<ExampleId> {
        self.examples.iter().map(|e| e.id).collect()
    }

    /// The leading `ceil(fraction * len)` examples, at least one.
    pub fn head_fraction(&self, fraction: f64) -> Dataset {
        let keep = ((fraction * self.len() as f64).ceil() as usize).clamp(1, self.len().max(1));
        Dataset {
            schema: self.schema.clone(),
            examples: self.examples[..keep.min(self.len())].to_vec(),
        }
    }

    /// Copy without the given ids.
    pub fn without(&self, ids: &HashSet<ExampleId>) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            examples: self.examples.iter().filter(|e| !ids.contains(&e.id)).cloned().collect(),
        }
    }

    /// Write as `id<TAB>label<TAB>text[<TAB>text2]`, one record per line.
    /// Tabs and line breaks inside texts are replaced by spaces.
    pub fn write_records<W: Write>(&self, mut w: W) -> Result<(), DataError> {
        for ex in &self.examples {
            write!(w, "{}\t{}", ex.id, ex.label)?;
            for t in &ex.texts {
                let clean: String = t.chars().map(|c| if matches!(c, '\t' | '\n' | '\r') { ' ' } else { c }).collect();
                write!(w, "\t{clean}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_records<R: BufRead>(schema: TaskSchema, r: R) -> Result<Dataset, DataError> {
        let mut examples = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let parse = |msg: &str| DataError::Parse { line: n + 1, msg: msg.to_string() };
            let mut fields = line.split('\t');
            let id = fields.next().and_then(|s| s.parse().ok()).ok_or_else(|| parse("bad id"))?;
            let label = fields.next().and_then(|s| s.parse().ok()).ok_or_else(|| parse("bad label"))?;
            let texts: Vec<String> = fields.map(str::to_string).collect();
            if texts.len() != schema.num_inputs() {
                return Err(parse("wrong number of text fields"));
            }
            examples.push(Example { id, texts, label });
        }
        Dataset::new(schema, examples)
    }
}

/// Read the first `limit` parseable rows of a GLUE-style TSV file.
///
/// Ids are assigned sequentially from 0 in file order over the kept rows.
/// Rows whose label is not in the schema (GLUE test splits use `-1` or leave
/// it blank) or that are missing fields are skipped; the skip count is
/// returned alongside the dataset.
pub fn load_glue_tsv(path: &Path, schema: &TaskSchema, limit: usize) -> Result<(Dataset, usize), DataError> {
    schema.validate()?;
    if limit == 0 {
        return Err(DataError::ZeroRequested);
    }
    let file = File::open(path).map_err(|source| DataError::Open { path: path.to_path_buf(), source })?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .flexible(true)
        .has_headers(true)
        .from_reader(BufReader::new(file));

    let headers = reader.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let text_cols = schema.text_columns.iter().map(|c| column(c)).collect::<Result<Vec<_>, _>>()?;
    let label_col = column(&schema.label_column)?;

    let mut examples = Vec::new();
    let mut skipped = 0usize;
    for record in reader.records() {
        if examples.len() == limit {
            break;
        }
        let record = match record {
            Ok(r) => r,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        let label = record.get(label_col).and_then(|raw| schema.label_index(raw.trim()));
        let texts: Option<Vec<String>> = text_cols.iter().map(|&c| record.get(c).map(str::to_string)).collect();
        match (label, texts) {
            (Some(label), Some(texts)) => examples.push(Example {
                id: examples.len() as ExampleId,
                texts,
                label,
            }),
            _ => skipped += 1,
        }
    }
    if examples.is_empty() {
        return Err(DataError::NoRows { skipped });
    }
    Ok((Dataset::new(schema.clone(), examples)?, skipped))
}

/// Deterministic train/test split; `|test| = round(test_fraction * |ds|)`.
/// Both sides keep ingestion order.
pub fn split_train_test(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::BadFraction(test_fraction));
    }
    let n = ds.len();
    let n_test = (test_fraction * n as f64).round() as usize;
    if n_test == 0 || n_test == n {
        return Err(DataError::DegenerateSplit { n, fraction: test_fraction });
    }
    let perm = SeedKey::new(seed).tag("split").rng().permutation(n);
    let mut is_test = vec![false; n];
    for &i in &perm[..n_test] {
        is_test[i] = true;
    }
    let (test, train): (Vec<_>, Vec<_>) = ds.examples.iter().cloned().zip(is_test).partition(|(_, t)| *t);
    let strip = |v: Vec<(Example, bool)>| v.into_iter().map(|(e, _)| e).collect::<Vec<_>>();
    Ok((
        Dataset { schema: ds.schema.clone(), examples: strip(train) },
        Dataset { schema: ds.schema.clone(), examples: strip(test) },
    ))
}

/// Parameters for [`synth_generate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub vocab_size: usize,
    pub tokens_per_example: usize,
    pub n: usize,
    /// Probability that a token comes from the class's own vocabulary block
    /// rather than the shared vocabulary. 1.0 gives disjoint class vocabularies.
    pub separation: f64,
    pub seed: u64,
}

/// Class-conditional bag-of-tokens data.
///
/// The vocabulary `t0..t{V-1}` is cut into `num_classes` contiguous blocks of
/// `V / num_classes` tokens. Each token of a class-`c` example is drawn from
/// block `c` with probability `separation`, otherwise uniformly from the
/// whole vocabulary.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset, DataError> {
    let SynthSpec { num_classes, vocab_size, tokens_per_example, n, separation, seed } = *spec;
    if n == 0 {
        return Err(DataError::Synth("n must be positive".into()));
    }
    if num_classes < 2 {
        return Err(DataError::Synth("need at least two classes".into()));
    }
    if vocab_size < num_classes {
        return Err(DataError::Synth(format!("vocab_size {vocab_size} < num_classes {num_classes}")));
    }
    if tokens_per_example == 0 {
        return Err(DataError::Synth("tokens_per_example must be positive".into()));
    }
    if !(0.0..=1.0).contains(&separation) {
        return Err(DataError::Synth(format!("separation {separation} outside [0, 1]")));
    }
    let block = (vocab_size / num_classes) as u64;
    let mut rng = SeedKey::new(seed).tag("synth").rng();
    let mut examples = Vec::with_capacity(n);
    for id in 0..n as u64 {
        let label = rng.below(num_classes as u64) as usize;
        let mut text = String::with_capacity(tokens_per_example * 6);
        for t in 0..tokens_per_example {
            let own = rng.next_f64() < separation;
            let token = if own {
                label as u64 * block + rng.below(block)
            } else {
                rng.below(vocab_size as u64)
            };
            if t > 0 {
                text.push(' ');
            }
            text.push('t');
            text.push_str(&token.to_string());
        }
        examples.push(Example { id, texts: vec![text], label });
    }
    Dataset::new(TaskSchema::synthetic(num_classes), examples)
}

/// Sparse vector with strictly increasing indices.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub dim: usize,
    pub indices: Vec<u32>,
    pub values: Vec<f32>,
}

impl FeatureVector {
    pub fn zeros(dim: usize) -> Self {
        FeatureVector { dim, indices: Vec::new(), values: Vec::new() }
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f32)> + '_ {
        self.indices.iter().map(|&i| i as usize).zip(self.values.iter().copied())
    }
}

/// Lowercased tokens, split on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
}

/// Hashed bag-of-words featurizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Featurizer {
    dim: usize,
    token_cap: usize,
}

impl Featurizer {
    pub fn new(dim: usize, token_cap: usize) -> Result<Self, DataError> {
        if dim == 0 || !dim.is_power_of_two() || dim > u32::MAX as usize {
            return Err(DataError::BadDim(dim));
        }
        if token_cap == 0 {
            return Err(DataError::BadTokenCap);
        }
        Ok(Featurizer { dim, token_cap })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Bucket of `token` in text field `field`: FNV-1a over the field index
    /// (`u64` little-endian) followed by the token's UTF-8 bytes.
    pub fn bucket(&self, field: usize, token: &str) -> u32 {
        let mut buf = Vec::with_capacity(8 + token.len());
        buf.extend_from_slice(&(field as u64).to_le_bytes());
        buf.extend_from_slice(token.as_bytes());
        (fnv1a64(&buf) & (self.dim as u64 - 1)) as u32
    }

    /// Token counts over the first `token_cap` tokens of each field, L2-normalized.
    pub fn featurize(&self, ex: &Example) -> FeatureVector {
        self.featurize_texts(&ex.texts)
    }

    pub fn featurize_texts<S: AsRef<str>>(&self, texts: &[S]) -> FeatureVector {
        let mut counts: HashMap<u32, u32> = HashMap::new();
        for (field, text) in texts.iter().enumerate() {
            for token in tokenize(text.as_ref()).take(self.token_cap) {
                *counts.entry(self.bucket(field, &token)).or_insert(0) += 1;
            }
        }
        let mut entries: Vec<(u32, u32)> = counts.into_iter().collect();
        entries.sort_unstable_by_key(|&(i, _)| i);
        let norm = entries.iter().map(|&(_, c)| (c as f64) * (c as f64)).sum::<f64>().sqrt();
        FeatureVector {
            dim: self.dim,
            indices: entries.iter().map(|&(i, _)| i).collect(),
            values: entries.iter().map(|&(_, c)| (c as f64 / norm) as f32).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_small_sst_file() {
        let f = write_tmp("sentence\tlabel\nit 's great\t1\ndull , flat\t0\nfine\t1\n");
        let (ds, skipped) = load_glue_tsv(f.path(), &TaskSchema::sst2(), 60_000).unwrap();
        assert_eq!(skipped, 0);
        assert_eq!(ds.ids(), vec![0, 1, 2]);
        assert_eq!(ds.examples().iter().map(|e| e.label).collect::<Vec<_>>(), vec![1, 0, 1]);
        assert_eq!(ds.schema().num_classes(), 2);
    }

    #[test]
    fn limit_zero_is_an_error() {
        let f = write_tmp("sentence\tlabel\na\t1\n");
        let err = load_glue_tsv(f.path(), &TaskSchema::sst2(), 0).unwrap_err();
        assert_eq!(err.to_string(), "zero parseable rows requested");
    }

    #[test]
    fn limit_counts_kept_rows_and_unknown_labels_are_skipped() {
        let f = write_tmp("sentence\tlabel\na\t1\nb\t-1\nc\t\nd\t0\ne\t1\n");
        let (ds, skipped) = load_glue_tsv(f.path(), &TaskSchema::sst2(), 2).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.examples()[1].texts[0], "d");
        assert_eq!(skipped, 2);
    }

    #[test]
    fn mnli_two_inputs_three_classes() {
        let f = write_tmp(
            "premise\thypothesis\tgold_label\nA man sleeps.\tA person rests.\tentailment\nX\tY\tneutral\nP\tQ\tcontradiction\n",
        );
        let (ds, _) = load_glue_tsv(f.path(), &TaskSchema::mnli(), 10).unwrap();
        assert_eq!(ds.examples().iter().map(|e| e.label).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(ds.examples()[0].texts.len(), 2);
    }

    #[test]
    fn missing_column_and_missing_file() {
        let f = write_tmp("text\tlabel\na\t1\n");
        assert!(matches!(
            load_glue_tsv(f.path(), &TaskSchema::sst2(), 5),
            Err(DataError::MissingColumn(c)) if c == "sentence"
        ));
        assert!(matches!(
            load_glue_tsv(Path::new("/nonexistent/x.tsv"), &TaskSchema::sst2(), 5),
            Err(DataError::Open { .. })
        ));
        let g = write_tmp("sentence\tlabel\na\tbad\n");
        assert!(matches!(load_glue_tsv(g.path(), &TaskSchema::sst2(), 5), Err(DataError::NoRows { skipped: 1 })));
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let ds = synth_generate(&SynthSpec {
            num_classes: 2,
            vocab_size: 10,
            tokens_per_example: 3,
            n: 10,
            separation: 0.5,
            seed: 1,
        })
        .unwrap();
        let (train, test) = split_train_test(&ds, 0.5, 9).unwrap();
        assert_eq!((train.len(), test.len()), (5, 5));
        let a: HashSet<_> = train.ids().into_iter().collect();
        assert!(test.ids().iter().all(|id| !a.contains(id)));
        let (train2, test2) = split_train_test(&ds, 0.5, 9).unwrap();
        assert_eq!((train, test), (train2, test2));
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let ds = synth_generate(&SynthSpec {
            num_classes: 2,
            vocab_size: 10,
            tokens_per_example: 3,
            n: 10,
            separation: 0.5,
            seed: 1,
        })
        .unwrap();
        for f in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(split_train_test(&ds, f, 0), Err(DataError::BadFraction(_))));
        }
    }

    #[test]
    fn synth_errors() {
        let base = SynthSpec { num_classes: 2, vocab_size: 100, tokens_per_example: 5, n: 10, separation: 1.0, seed: 0 };
        assert!(synth_generate(&SynthSpec { n: 0, ..base }).is_err());
        assert!(synth_generate(&SynthSpec { vocab_size: 1, ..base }).is_err());
        assert!(synth_generate(&SynthSpec { separation: 1.5, ..base }).is_err());
    }

    #[test]
    fn synth_is_deterministic_and_separable_vocab() {
        let spec = SynthSpec { num_classes: 2, vocab_size: 1000, tokens_per_example: 20, n: 200, separation: 1.0, seed: 42 };
        let a = synth_generate(&spec).unwrap();
        let b = synth_generate(&spec).unwrap();
        let mut ba = Vec::new();
        let mut bb = Vec::new();
        a.write_records(&mut ba).unwrap();
        b.write_records(&mut bb).unwrap();
        assert_eq!(ba, bb);
        for ex in a.examples() {
            for tok in ex.texts[0].split(' ') {
                let v: usize = tok[1..].parse().unwrap();
                assert_eq!(v / 500, ex.label);
            }
        }
    }

    #[test]
    fn record_round_trip() {
        let ds = Dataset::new(
            TaskSchema::qqp(),
            vec![
                Example { id: 4, texts: vec!["a\tb".into(), "c".into()], label: 1 },
                Example { id: 9, texts: vec!["".into(), "d e".into()], label: 0 },
            ],
        )
        .unwrap();
        let mut buf = Vec::new();
        ds.write_records(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "4\t1\ta b\tc\n9\t0\t\td e\n");
        let back = Dataset::read_records(TaskSchema::qqp(), Cursor::new(buf)).unwrap();
        assert_eq!(back.ids(), vec![4, 9]);
        assert_eq!(back.examples()[1].texts, vec!["".to_string(), "d e".to_string()]);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let ex = Example { id: 1, texts: vec!["a".into()], label: 0 };
        assert!(matches!(
            Dataset::new(TaskSchema::sst2(), vec![ex.clone(), ex]),
            Err(DataError::DuplicateId(1))
        ));
    }

    #[test]
    fn tokenizer_lowercases_and_splits_punctuation() {
        let toks: Vec<String> = tokenize("Hello, WORLD!it's  ok").collect();
        assert_eq!(toks, vec!["hello", "world", "it", "s", "ok"]);
    }

    #[test]
    fn empty_text_gives_zero_vector() {
        let f = Featurizer::new(4096, 256).unwrap();
        let v = f.featurize_texts(&[""]);
        assert_eq!(v.nnz(), 0);
        assert_eq!(v.dim, 4096);
    }

    #[test]
    fn featurize_is_normalized_sorted_and_stable() {
        let f = Featurizer::new(4096, 256).unwrap();
        let ex = Example { id: 0, texts: vec!["the cat the hat".into()], label: 0 };
        let v = f.featurize(&ex);
        assert_eq!(v, f.featurize(&ex));
        assert!(v.indices.windows(2).all(|w| w[0] < w[1]));
        let norm: f64 = v.values.iter().map(|&x| (x as f64).powi(2)).sum();
        assert!((norm - 1.0).abs() < 1e-6);
        // "the" appears twice: value 2/sqrt(6)
        let the = f.bucket(0, "the");
        let pos = v.indices.iter().position(|&i| i == the).unwrap();
        assert!((v.values[pos] as f64 - 2.0 / 6f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn token_cap_truncates_each_field() {
        let f = Featurizer::new(1 << 16, 256).unwrap();
        let words: Vec<String> = (0..300).map(|i| format!("w{i}")).collect();
        let v = f.featurize_texts(&[words.join(" ")]);
        let first: Vec<String> = words[..256].to_vec();
        assert_eq!(v, f.featurize_texts(&[first.join(" ")]));
        assert!(v.nnz() <= 256);
    }

    #[test]
    fn field_index_changes_bucket() {
        let f = Featurizer::new(1 << 20, 8).unwrap();
        assert_ne!(f.bucket(0, "what"), f.bucket(1, "what"));
    }

    #[test]
    fn featurizer_rejects_non_power_of_two() {
        assert!(matches!(Featurizer::new(1000, 8), Err(DataError::BadDim(1000))));
        assert!(matches!(Featurizer::new(1024, 0), Err(DataError::BadTokenCap)));
    }
}
