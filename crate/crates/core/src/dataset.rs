//! Intent-detection corpora: loading, label indexing and balanced K-shot
//! sampling.
//!
//! A corpus is one file per split (train or test) in either CSV with a
//! `text,category` header or JSON Lines with `text` and `category` keys.
//! Rows keep file order and every dataset carries the SHA-256 digest of the
//! bytes it was parsed from, which binds embedding stores and split files to
//! the exact source.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// SHA-256 content digest.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn of_bytes(bytes: &[u8]) -> Self {
        Digest(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let bytes = hex::decode(s).map_err(|e| Error::Format(format!("bad digest `{s}`: {e}")))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Format(format!("digest `{s}` is not 32 bytes")))?;
        Ok(Digest(arr))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// SHA-256 of the raw bytes of `path`.
pub fn dataset_digest(path: &Path) -> Result<Digest> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Digest::of_bytes(&bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Csv,
    Jsonl,
}

impl DatasetFormat {
    /// Infers the format from the file extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) => ext.parse(),
            None => Err(Error::Usage(format!(
                "cannot infer dataset format of {} (expected .csv or .jsonl)",
                path.display()
            ))),
        }
    }
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(DatasetFormat::Csv),
            "jsonl" | "json" => Ok(DatasetFormat::Jsonl),
            other => Err(Error::Usage(format!("unknown dataset format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Row {
    pub index: usize,
    pub text: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub name: String,
    rows: Vec<Row>,
    digest: Digest,
}

impl Dataset {
    /// Loads a dataset, inferring the format from the extension.
    pub fn load(path: &Path) -> Result<Self> {
        load_dataset(path, DatasetFormat::from_path(path)?)
    }

    /// Builds a dataset from `(text, label)` pairs. The digest is that of the
    /// canonical CSV serialisation, so `from_pairs` and loading the output of
    /// [`Dataset::to_canonical_csv`] agree.
    pub fn from_pairs<I, S, L>(name: impl Into<String>, pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, L)>,
        S: Into<String>,
        L: Into<String>,
    {
        let rows: Vec<Row> = pairs
            .into_iter()
            .enumerate()
            .map(|(index, (t, l))| Row {
                index,
                text: t.into(),
                label: l.into(),
            })
            .collect();
        for row in &rows {
            validate_row(Path::new("<memory>"), row.index as u64 + 2, &row.text, &row.label)?;
        }
        let mut ds = Dataset {
            name: name.into(),
            rows,
            digest: Digest([0; 32]),
        };
        ds.digest = Digest::of_bytes(&ds.to_canonical_csv()?);
        Ok(ds)
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn digest(&self) -> Digest {
        self.digest
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.rows.iter().map(|r| r.label.as_str())
    }

    /// Serialises to CSV with a `text,category` header, LF line endings and
    /// minimal RFC 4180 quoting.
    pub fn to_canonical_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let write_err = |e: csv::Error| Error::Format(format!("csv write: {e}"));
        w.write_record(["text", "category"]).map_err(write_err)?;
        for row in &self.rows {
            w.write_record([row.text.as_str(), row.label.as_str()])
                .map_err(write_err)?;
        }
        w.into_inner()
            .map_err(|e| Error::Format(format!("csv write: {}", e.error())))
    }

    pub fn write_canonical_csv(&self, path: &Path) -> Result<()> {
        let bytes = self.to_canonical_csv()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Subset of rows, re-indexed from zero in the given order.
    pub fn select(&self, name: impl Into<String>, indices: &[usize]) -> Result<Dataset> {
        let pairs = indices
            .iter()
            .map(|&i| {
                self.rows
                    .get(i)
                    .map(|r| (r.text.clone(), r.label.clone()))
                    .ok_or(Error::OutOfRange {
                        index: i,
                        len: self.rows.len(),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::from_pairs(name, pairs)
    }
}

fn validate_row(path: &Path, line: u64, text: &str, label: &str) -> Result<()> {
    let fail = |message: &str| Error::Load {
        path: path.to_path_buf(),
        line,
        message: message.to_string(),
    };
    if text.trim().is_empty() {
        return Err(fail("empty `text`"));
    }
    if label.trim().is_empty() {
        return Err(fail("empty `category`"));
    }
    Ok(())
}

/// Reads `path` in the given format. The dataset name is the file stem.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = Digest::of_bytes(&bytes);
    let pairs = match format {
        DatasetFormat::Csv => parse_csv(path, &bytes)?,
        DatasetFormat::Jsonl => parse_jsonl(path, &bytes)?,
    };
    let rows = pairs
        .into_iter()
        .enumerate()
        .map(|(index, (text, label))| Row { index, text, label })
        .collect();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Dataset { name, rows, digest })
}

fn parse_csv(path: &Path, bytes: &[u8]) -> Result<Vec<(String, String)>> {
    let load_err = |line: u64, message: String| Error::Load {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(bytes);
    let headers = reader
        .headers()
        .map_err(|e| load_err(1, format!("unreadable header: {e}")))?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| load_err(1, format!("header is missing `{name}` (expected `text,category`)")))
    };
    let text_col = column("text")?;
    let label_col = column("category")?;

    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            load_err(line, format!("malformed row: {e}"))
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let text = record
            .get(text_col)
            .ok_or_else(|| load_err(line, "missing `text` field".into()))?;
        let label = record
            .get(label_col)
            .ok_or_else(|| load_err(line, "missing `category` field".into()))?;
        validate_row(path, line, text, label)?;
        out.push((text.to_string(), label.to_string()));
    }
    Ok(out)
}

fn parse_jsonl(path: &Path, bytes: &[u8]) -> Result<Vec<(String, String)>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        line: 0,
        message: format!("not valid UTF-8: {e}"),
    })?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i as u64 + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let load_err = |message: String| Error::Load {
            path: path.to_path_buf(),
            line,
            message,
        };
        let value: serde_json::Value =
            serde_json::from_str(raw).map_err(|e| load_err(format!("malformed JSON: {e}")))?;
        let field = |key: &str| -> Result<String> {
            match value.get(key) {
                Some(serde_json::Value::String(s)) => Ok(s.clone()),
                Some(_) => Err(load_err(format!("`{key}` is not a string"))),
                None => Err(load_err(format!("missing `{key}` field"))),
            }
        };
        let text = field("text")?;
        let label = field("category")?;
        validate_row(path, line, &text, &label)?;
        out.push((text, label));
    }
    Ok(out)
}

/// Bijection between label strings and class ids, ordered lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelIndex {
    labels: Vec<String>,
    #[serde(skip)]
    ids: BTreeMap<String, usize>,
}

impl LabelIndex {
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<&str> = labels.into_iter().collect();
        let labels: Vec<String> = set.into_iter().map(str::to_string).collect();
        let ids = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        LabelIndex { labels, ids }
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.ids.get(label).copied()
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }

    /// Class id of every row, failing on labels this index does not know.
    pub fn class_ids(&self, dataset: &Dataset) -> Result<Vec<usize>> {
        dataset
            .rows()
            .iter()
            .map(|r| {
                self.id(&r.label).ok_or_else(|| {
                    Error::Incompatible(format!(
                        "{}: row {} has label `{}` absent from the training labels",
                        dataset.name, r.index, r.label
                    ))
                })
            })
            .collect()
    }
}

pub fn build_label_index(dataset: &Dataset) -> Result<LabelIndex> {
    if dataset.is_empty() {
        return Err(Error::Incompatible(format!("dataset `{}` is empty", dataset.name)));
    }
    Ok(LabelIndex::from_labels(dataset.labels()))
}

/// Balanced K-shot subset of a training dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub dataset_digest: Digest,
    pub k: usize,
    pub seed: u64,
    pub row_indices: Vec<usize>,
}

/// Draws exactly `k` rows per class without replacement.
///
/// Classes are visited in id order; within a class the candidate rows are in
/// file order and a single seeded stream drives a partial Fisher-Yates draw.
pub fn few_shot_sample(
    dataset: &Dataset,
    labels: &LabelIndex,
    k: usize,
    seed: u64,
) -> Result<FewShotSplit> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); labels.num_classes()];
    for (row, class) in dataset.rows().iter().zip(labels.class_ids(dataset)?) {
        by_class[class].push(row.index);
    }
    let mut rng = SeededRng::new(seed);
    let mut row_indices = Vec::with_capacity(k * by_class.len());
    for (class, rows) in by_class.iter().enumerate() {
        if rows.len() < k {
            return Err(Error::Sampling {
                label: labels.label(class).unwrap_or_default().to_string(),
                available: rows.len(),
                k,
            });
        }
        row_indices.extend(rng.choose_distinct(rows, k));
    }
    row_indices.sort_unstable();
    Ok(FewShotSplit {
        dataset_digest: dataset.digest(),
        k,
        seed,
        row_indices,
    })
}

impl FewShotSplit {
    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
    }

    /// Checks digest binding, index validity and per-class balance.
    pub fn validate(&self, dataset: &Dataset, labels: &LabelIndex) -> Result<()> {
        if self.dataset_digest != dataset.digest() {
            return Err(Error::Incompatible(format!(
                "split is bound to {} but dataset `{}` has digest {}",
                self.dataset_digest,
                dataset.name,
                dataset.digest()
            )));
        }
        let classes = labels.class_ids(dataset)?;
        let mut counts = vec![0usize; labels.num_classes()];
        let mut seen = BTreeSet::new();
        for &i in &self.row_indices {
            let class = *classes.get(i).ok_or(Error::OutOfRange {
                index: i,
                len: dataset.len(),
            })?;
            if !seen.insert(i) {
                return Err(Error::Incompatible(format!("split repeats row {i}")));
            }
            counts[class] += 1;
        }
        if let Some((class, &n)) = counts.iter().enumerate().find(|(_, &n)| n != self.k) {
            return Err(Error::Incompatible(format!(
                "split has {n} rows for class `{}`, expected k={}",
                labels.label(class).unwrap_or_default(),
                self.k
            )));
        }
        Ok(())
    }
}

/// Locates `<dir>/<stem>.csv` or `<dir>/<stem>.jsonl`.
pub fn find_split_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    for ext in ["csv", "jsonl"] {
        let p = dir.join(format!("{stem}.{ext}"));
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Usage(format!(
        "{} has no {stem}.csv or {stem}.jsonl",
        dir.display()
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str, ext: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(ext).tempfile().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn minimal_csv() {
        let f = write_tmp("text,category\nhi,greet\n", ".csv");
        let ds = Dataset::load(f.path()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.rows()[0].index, 0);
        assert_eq!(ds.rows()[0].text, "hi");
        let idx = build_label_index(&ds).unwrap();
        assert_eq!(idx.num_classes(), 1);
    }

    #[test]
    fn csv_quoting_and_order() {
        let f = write_tmp(
            "text,category\n\"hello, there\",greet\n\"say \"\"bye\"\"\",leave\nplain,greet\n",
            ".csv",
        );
        let ds = Dataset::load(f.path()).unwrap();
        let texts: Vec<_> = ds.rows().iter().map(|r| r.text.as_str()).collect();
        assert_eq!(texts, ["hello, there", "say \"bye\"", "plain"]);
    }

    #[test]
    fn empty_text_names_line() {
        let f = write_tmp("text,category\nok,a\n,b\n", ".csv");
        let err = Dataset::load(f.path()).unwrap_err();
        match err {
            Error::Load { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_field_names_line() {
        let f = write_tmp("text,category\nok,a\nlonely\n", ".csv");
        let err = Dataset::load(f.path()).unwrap_err();
        assert!(matches!(err, Error::Load { line: 3, .. }), "{err:?}");
        assert!(err.to_string().contains(":3:"));
    }

    #[test]
    fn wrong_header_rejected() {
        let f = write_tmp("utterance,intent\nhi,greet\n", ".csv");
        assert!(matches!(
            Dataset::load(f.path()),
            Err(Error::Load { line: 1, .. })
        ));
    }

    #[test]
    fn jsonl_loading() {
        let f = write_tmp(
            "{\"text\":\"book a flight\",\"category\":\"travel\"}\n\n{\"text\":\"hi\",\"category\":\"greet\"}\n",
            ".jsonl",
        );
        let ds = Dataset::load(f.path()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.rows()[1].label, "greet");
    }

    #[test]
    fn jsonl_missing_key_names_line() {
        let f = write_tmp("{\"text\":\"a\",\"category\":\"x\"}\n{\"text\":\"b\"}\n", ".jsonl");
        let err = Dataset::load(f.path()).unwrap_err();
        assert!(matches!(err, Error::Load { line: 2, .. }), "{err:?}");
    }

    #[test]
    fn unknown_format_is_usage_error() {
        let err = DatasetFormat::from_path(Path::new("data.tsv")).unwrap_err();
        assert_eq!(err.kind(), crate::error::ErrorKind::Usage);
        assert!("xml".parse::<DatasetFormat>().is_err());
    }

    #[test]
    fn empty_file_digest_is_known_constant() {
        let f = write_tmp("", ".csv");
        assert_eq!(
            dataset_digest(f.path()).unwrap().to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn one_byte_change_changes_digest() {
        // Reference values from an external SHA-256 implementation.
        let a = write_tmp("text,category\nhi,greet\n", ".csv");
        let b = write_tmp("text,category\nhi,greeT\n", ".csv");
        let da = dataset_digest(a.path()).unwrap();
        let db = dataset_digest(b.path()).unwrap();
        assert_eq!(da, dataset_digest(a.path()).unwrap());
        assert_ne!(da, db);
        assert_eq!(
            da.to_hex(),
            "a5b1ad5f5824fe7e31abdb517df16fcd90e78e6f553445f4a0106e9c81f52962"
        );
        assert_eq!(
            db.to_hex(),
            "278b157727e9caa4831dd67f61a324320460670b10be8dab873c5a5704843778"
        );
    }

    #[test]
    fn labels_are_lexicographic() {
        let ds = Dataset::from_pairs("t", [("x", "b"), ("y", "a"), ("z", "b")]).unwrap();
        let idx = build_label_index(&ds).unwrap();
        assert_eq!(idx.id("a"), Some(0));
        assert_eq!(idx.id("b"), Some(1));
        assert_eq!(idx.class_ids(&ds).unwrap(), vec![1, 0, 1]);
    }

    #[test]
    fn empty_dataset_has_no_index() {
        let ds = Dataset::from_pairs("t", Vec::<(String, String)>::new()).unwrap();
        assert!(build_label_index(&ds).is_err());
    }

    #[test]
    fn sampler_reports_deficient_class() {
        let ds = Dataset::from_pairs(
            "t",
            [("a1", "a"), ("a2", "a"), ("a3", "a"), ("b1", "b")],
        )
        .unwrap();
        let idx = build_label_index(&ds).unwrap();
        let err = few_shot_sample(&ds, &idx, 2, 0).unwrap_err();
        match err {
            Error::Sampling { label, available, k } => {
                assert_eq!((label.as_str(), available, k), ("b", 1, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn split_file_round_trip_and_validation() {
        let pairs: Vec<_> = (0..30).map(|i| (format!("t{i}"), format!("c{}", i % 3))).collect();
        let ds = Dataset::from_pairs("t", pairs).unwrap();
        let idx = build_label_index(&ds).unwrap();
        let split = few_shot_sample(&ds, &idx, 4, 9).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        split.write(f.path()).unwrap();
        let back = FewShotSplit::read(f.path()).unwrap();
        assert_eq!(back, split);
        back.validate(&ds, &idx).unwrap();

        let json: serde_json::Value =
            serde_json::from_slice(&fs::read(f.path()).unwrap()).unwrap();
        assert_eq!(json["dataset_digest"], ds.digest().to_hex());
        assert_eq!(json["k"], 4);

        let mut bad = split.clone();
        bad.row_indices[0] = bad.row_indices[1];
        assert!(bad.validate(&ds, &idx).is_err());
    }

    #[test]
    fn canonical_csv_round_trip() {
        let ds = Dataset::from_pairs(
            "t",
            [("with, comma", "a"), ("quote \" inside", "b"), ("line\nbreak", "a")],
        )
        .unwrap();
        let f = tempfile::Builder::new().suffix(".csv").tempfile().unwrap();
        ds.write_canonical_csv(f.path()).unwrap();
        let back = Dataset::load(f.path()).unwrap();
        assert_eq!(back.rows(), ds.rows());
        assert_eq!(back.digest(), ds.digest());
    }
}
