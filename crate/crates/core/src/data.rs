//! CSV ingestion, schema inference, standardization / one-hot encoding and
//! the seeded 80/10/10 split.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numeric::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Numerical,
    Categorical,
}

impl FeatureKind {
    /// Row of the feature-type embedding table.
    pub fn type_index(self) -> usize {
        match self {
            FeatureKind::Numerical => 0,
            FeatureKind::Categorical => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    /// Width `e_j` of the encoded feature.
    pub cardinality: usize,
    pub mean: f64,
    pub std: f64,
    /// Category values in index order (categorical only).
    pub categories: Vec<String>,
}

impl FeatureSpec {
    fn category_index(&self, value: &str) -> Option<usize> {
        self.categories
            .binary_search_by(|c| c.as_str().cmp(value))
            .ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub features: Vec<FeatureSpec>,
    pub fitted: bool,
}

impl FeatureSchema {
    pub fn d(&self) -> usize {
        self.features.len()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.features.iter().map(|f| f.cardinality).collect()
    }

    pub fn kinds(&self) -> Vec<FeatureKind> {
        self.features.iter().map(|f| f.kind).collect()
    }

    /// Hex SHA-256 of the canonical JSON form; identifies the feature
    /// layout and its fitted statistics.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("schema serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TabularDataset {
    pub feature_names: Vec<String>,
    /// Raw cell text, `rows × d`.
    pub values: Vec<Vec<String>>,
    /// Kinds inferred at load; statistics empty until fitted.
    pub schema: FeatureSchema,
    pub splits: Vec<Split>,
    pub target_name: Option<String>,
    pub target: Option<Vec<String>>,
}

fn is_missing(s: &str) -> bool {
    matches!(s.trim(), "" | "NA" | "NaN" | "nan" | "?")
}

fn parse_num(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

impl TabularDataset {
    /// Builds a dataset from a header and string records. Every record is
    /// assigned to the training split until [`TabularDataset::assign_splits`]
    /// is called.
    pub fn from_records(
        header: Vec<String>,
        records: Vec<Vec<String>>,
        target_column: Option<&str>,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data("dataset has no rows".into()));
        }
        let width = header.len();
        for (i, r) in records.iter().enumerate() {
            if r.len() != width {
                return Err(Error::Parse(format!(
                    "row {}: expected {width} fields, found {}",
                    i + 1,
                    r.len()
                )));
            }
        }
        let target_idx = match target_column {
            Some(t) => Some(
                header
                    .iter()
                    .position(|h| h == t)
                    .ok_or_else(|| Error::Data(format!("target column {t:?} not found")))?,
            ),
            None => None,
        };
        let feature_cols: Vec<usize> = (0..width).filter(|&c| Some(c) != target_idx).collect();
        if feature_cols.is_empty() {
            return Err(Error::Data("no input features".into()));
        }

        let mut features = Vec::with_capacity(feature_cols.len());
        for &c in &feature_cols {
            let numeric = records
                .iter()
                .map(|r| r[c].as_str())
                .filter(|s| !is_missing(s))
                .all(|s| parse_num(s).is_some());
            let any_present = records.iter().any(|r| !is_missing(&r[c]));
            let kind = if numeric && any_present {
                FeatureKind::Numerical
            } else {
                FeatureKind::Categorical
            };
            if kind == FeatureKind::Numerical {
                if let Some(i) = records.iter().position(|r| is_missing(&r[c])) {
                    return Err(Error::Data(format!(
                        "row {}: missing value in numerical column {:?}",
                        i + 1,
                        header[c]
                    )));
                }
            }
            features.push(FeatureSpec {
                name: header[c].clone(),
                kind,
                cardinality: 1,
                mean: 0.0,
                std: 1.0,
                categories: Vec::new(),
            });
        }

        let values = records
            .iter()
            .map(|r| feature_cols.iter().map(|&c| r[c].clone()).collect())
            .collect();
        let target = target_idx.map(|t| records.iter().map(|r| r[t].clone()).collect());
        Ok(TabularDataset {
            feature_names: feature_cols.iter().map(|&c| header[c].clone()).collect(),
            values,
            schema: FeatureSchema {
                features,
                fitted: false,
            },
            splits: vec![Split::Train; records.len()],
            target_name: target_column.map(str::to_string),
            target,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn d(&self) -> usize {
        self.feature_names.len()
    }

    pub fn assign_splits(&mut self, seed: u64) -> Result<()> {
        self.splits = split(self.len(), seed)?;
        Ok(())
    }

    pub fn rows_in(&self, s: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == s).collect()
    }
}

/// Column names from the first record of a CSV file.
pub fn csv_header(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(file);
    match reader.records().next() {
        Some(rec) => {
            let rec = rec.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
            Ok(rec.iter().map(|s| s.trim().to_string()).collect())
        }
        None => Err(Error::Data(format!("{}: empty file", path.display()))),
    }
}

/// Reads a UTF-8, comma-separated file. Without a header, columns are named
/// `c0, c1, ...`.
pub fn load_csv(path: impl AsRef<Path>, has_header: bool, target_column: Option<&str>) -> Result<TabularDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);

    let mut header: Option<Vec<String>> = None;
    let mut records = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let line = rec.position().map_or(0, |p| p.line());
        let fields: Vec<String> = rec.iter().map(|s| s.trim().to_string()).collect();
        if has_header && header.is_none() {
            header = Some(fields);
            continue;
        }
        let expected = header.as_ref().map(Vec::len).or(records.first().map(|r: &Vec<String>| r.len()));
        if let Some(w) = expected {
            if fields.len() != w {
                return Err(Error::Parse(format!(
                    "row {line}: expected {w} fields, found {}",
                    fields.len()
                )));
            }
        }
        records.push(fields);
    }
    if records.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    let header = header.unwrap_or_else(|| (0..records[0].len()).map(|i| format!("c{i}")).collect());
    TabularDataset::from_records(header, records, target_column)
}

/// Fits standardization statistics and category dictionaries on the rows of
/// one split.
pub fn fit_preprocessor(ds: &TabularDataset, split: Split) -> Result<FeatureSchema> {
    let rows = ds.rows_in(split);
    if rows.is_empty() {
        return Err(Error::Data(format!("{split:?} split is empty")));
    }
    let mut schema = ds.schema.clone();
    for (j, spec) in schema.features.iter_mut().enumerate() {
        match spec.kind {
            FeatureKind::Numerical => {
                let xs: Vec<f64> = rows
                    .iter()
                    .map(|&i| {
                        parse_num(&ds.values[i][j])
                            .ok_or_else(|| Error::Data(format!("row {}: bad number", i + 1)))
                    })
                    .collect::<Result<_>>()?;
                let n = xs.len() as f64;
                let mean = xs.iter().sum::<f64>() / n;
                let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                let std = var.sqrt();
                if std <= 1e-12 {
                    return Err(Error::Data(format!(
                        "numerical column {:?} is constant on the training split",
                        spec.name
                    )));
                }
                spec.mean = mean;
                spec.std = std;
                spec.cardinality = 1;
                spec.categories.clear();
            }
            FeatureKind::Categorical => {
                let dict: BTreeMap<&str, ()> = rows.iter().map(|&i| (ds.values[i][j].as_str(), ())).collect();
                spec.categories = dict.keys().map(|s| s.to_string()).collect();
                spec.cardinality = spec.categories.len().max(1);
                spec.mean = 0.0;
                spec.std = 1.0;
            }
        }
    }
    schema.fitted = true;
    Ok(schema)
}

/// Per-feature encoded vectors `E(x_j)`, of widths `e_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample<T> {
    pub features: Vec<Vec<T>>,
}

impl<T: Real> EncodedSample<T> {
    pub fn d(&self) -> usize {
        self.features.len()
    }

    /// Builds a sample of numerical (width 1) features.
    pub fn numerical(values: &[T]) -> Self {
        EncodedSample {
            features: values.iter().map(|&v| vec![v]).collect(),
        }
    }
}

/// Counts categories seen at transform time but absent from the dictionary.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UnseenTally {
    pub count: usize,
}

pub fn transform<T: Real>(schema: &FeatureSchema, row: &[String], tally: &mut UnseenTally) -> Result<EncodedSample<T>> {
    if !schema.fitted {
        return Err(Error::Contract("transform requires a fitted schema".into()));
    }
    if row.len() != schema.d() {
        return Err(Error::dim(format!("row has {} features, schema {}", row.len(), schema.d())));
    }
    let mut features = Vec::with_capacity(row.len());
    for (spec, cell) in schema.features.iter().zip(row) {
        match spec.kind {
            FeatureKind::Numerical => {
                let x = parse_num(cell)
                    .ok_or_else(|| Error::Data(format!("{:?}: {cell:?} is not a number", spec.name)))?;
                features.push(vec![T::of((x - spec.mean) / spec.std)]);
            }
            FeatureKind::Categorical => {
                let mut v = vec![T::zero(); spec.cardinality];
                match spec.category_index(cell) {
                    Some(k) => v[k] = T::one(),
                    None => tally.count += 1,
                }
                features.push(v);
            }
        }
    }
    Ok(EncodedSample { features })
}

/// Encodes the given rows of a dataset.
pub fn encode_rows<T: Real>(
    ds: &TabularDataset,
    schema: &FeatureSchema,
    rows: &[usize],
    tally: &mut UnseenTally,
) -> Result<Vec<EncodedSample<T>>> {
    rows.iter()
        .map(|&i| transform(schema, &ds.values[i], tally))
        .collect()
}

/// Seeded shuffled partition: `round(0.8N)` train, `round(0.1N)` val, the
/// rest test.
pub fn split(n: usize, seed: u64) -> Result<Vec<Split>> {
    if n < 10 {
        return Err(Error::Data(format!("need at least 10 rows to split, got {n}")));
    }
    let n_train = (0.8 * n as f64).round() as usize;
    let n_val = (0.1 * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Split::Test; n];
    for (pos, &i) in order.iter().enumerate() {
        out[i] = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(header: &[&str], rows: &[&[&str]], target: Option<&str>) -> TabularDataset {
        TabularDataset::from_records(
            header.iter().map(|s| s.to_string()).collect(),
            rows.iter().map(|r| r.iter().map(|s| s.to_string()).collect()).collect(),
            target,
        )
        .unwrap()
    }

    #[test]
    fn infers_kinds() {
        let d = ds(&["a", "b", "c"], &[&["1", "2.5", "x"], &["2", "3", "y"]], None);
        assert_eq!(
            d.schema.kinds(),
            vec![FeatureKind::Numerical, FeatureKind::Numerical, FeatureKind::Categorical]
        );
    }

    #[test]
    fn target_column_is_held_out() {
        let d = ds(&["a", "y", "b"], &[&["1", "0", "2"], &["2", "1", "3"]], Some("y"));
        assert_eq!(d.d(), 2);
        assert_eq!(d.feature_names, vec!["a", "b"]);
        assert_eq!(d.target.as_ref().unwrap(), &vec!["0".to_string(), "1".to_string()]);
    }

    #[test]
    fn standardizes_with_population_std() {
        let d = ds(&["a"], &[&["1"], &["2"], &["3"]], None);
        let schema = fit_preprocessor(&d, Split::Train).unwrap();
        let f = &schema.features[0];
        assert!((f.mean - 2.0).abs() < 1e-15);
        assert!((f.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let mut tally = UnseenTally::default();
        let enc: Vec<f64> = (0..3)
            .map(|i| transform::<f64>(&schema, &d.values[i], &mut tally).unwrap().features[0][0])
            .collect();
        let expected = [-1.224_744_871_391_589, 0.0, 1.224_744_871_391_589];
        for (a, b) in enc.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn categorical_dictionary_and_one_hot() {
        let d = ds(&["c"], &[&["A"], &["B"], &["A"]], None);
        let schema = fit_preprocessor(&d, Split::Train).unwrap();
        assert_eq!(schema.features[0].categories, vec!["A", "B"]);
        assert_eq!(schema.features[0].cardinality, 2);

        let d3 = ds(&["c"], &[&["A"], &["B"], &["C"]], None);
        let schema = fit_preprocessor(&d3, Split::Train).unwrap();
        let mut tally = UnseenTally::default();
        let b = transform::<f32>(&schema, &["B".to_string()], &mut tally).unwrap();
        assert_eq!(b.features[0], vec![0.0, 1.0, 0.0]);
        let unseen = transform::<f32>(&schema, &["D".to_string()], &mut tally).unwrap();
        assert_eq!(unseen.features[0], vec![0.0, 0.0, 0.0]);
        assert_eq!(tally.count, 1);
    }

    #[test]
    fn constant_column_is_rejected() {
        let d = ds(&["a"], &[&["4"], &["4"], &["4"]], None);
        assert!(matches!(fit_preprocessor(&d, Split::Train), Err(Error::Data(_))));
    }

    #[test]
    fn missing_numerical_value_is_rejected() {
        let r = TabularDataset::from_records(
            vec!["a".into()],
            vec![vec!["1".into()], vec!["".into()], vec!["2".into()]],
            None,
        );
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn split_sizes() {
        for (n, sizes) in [(100, (80, 10, 10)), (10, (8, 1, 1)), (37, (30, 4, 3))] {
            let s = split(n, 3).unwrap();
            let count = |x| s.iter().filter(|&&v| v == x).count();
            assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), sizes);
        }
        assert_eq!(split(50, 9).unwrap(), split(50, 9).unwrap());
        assert_ne!(split(50, 9).unwrap(), split(50, 10).unwrap());
        assert!(split(9, 0).is_err());
    }
}
