//! Observation matrices with category labels: CSV and binary ingestion,
//! column standardization, imbalanced train/test splits and a synthetic
//! shared/private benchmark generator.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SclvmError};
use crate::kernels::CategoryLabel;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub y: DMatrix<f64>,
    pub labels: Vec<CategoryLabel>,
    pub category_count: usize,
    pub name: String,
    /// Source value of each category, indexed by `label.index()`.
    pub label_names: Vec<String>,
    pub feature_names: Vec<String>,
    pub label_column: Option<String>,
}

impl Dataset {
    pub fn new(y: DMatrix<f64>, labels: Vec<CategoryLabel>, category_count: usize, name: impl Into<String>) -> Result<Self> {
        let d = y.ncols();
        let ds = Dataset {
            y,
            labels,
            category_count,
            name: name.into(),
            label_names: (1..=category_count).map(|c| c.to_string()).collect(),
            feature_names: (1..=d).map(|j| format!("f{j}")).collect(),
            label_column: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn d(&self) -> usize {
        self.y.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.y.nrows() {
            return Err(SclvmError::data(format!(
                "{} rows but {} labels",
                self.y.nrows(),
                self.labels.len()
            )));
        }
        if let Some(l) = self
            .labels
            .iter()
            .find(|l| l.0 == 0 || l.0 as usize > self.category_count)
        {
            return Err(SclvmError::data(format!(
                "label {l} outside 1..={}",
                self.category_count
            )));
        }
        if self.y.iter().any(|v| !v.is_finite()) {
            return Err(SclvmError::data("observations contain NaN or infinite values"));
        }
        Ok(())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.category_count];
        for l in &self.labels {
            counts[l.index()] += 1;
        }
        counts
    }

    /// Rows `idx` in the given order, keeping the label mapping.
    pub fn subset(&self, idx: &[usize], name: impl Into<String>) -> Dataset {
        let y = DMatrix::from_fn(idx.len(), self.d(), |i, j| self.y[(idx[i], j)]);
        Dataset {
            y,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            category_count: self.category_count,
            name: name.into(),
            label_names: self.label_names.clone(),
            feature_names: self.feature_names.clone(),
            label_column: self.label_column.clone(),
        }
    }
}

/// Per-column affine map to zero mean and unit scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    pub fn identity(d: usize) -> Self {
        Standardization {
            mean: vec![0.0; d],
            scale: vec![1.0; d],
        }
    }

    pub fn apply(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(y.nrows(), y.ncols(), |i, j| (y[(i, j)] - self.mean[j]) / self.scale[j])
    }

    pub fn apply_row(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn invert(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| z[(i, j)] * self.scale[j] + self.mean[j])
    }
}

/// Column-wise standardization over the whole dataset. Constant columns keep
/// scale 1.
pub fn standardize(d: &Dataset) -> (Dataset, Standardization) {
    let n = d.n().max(1) as f64;
    let mut mean = Vec::with_capacity(d.d());
    let mut scale = Vec::with_capacity(d.d());
    for j in 0..d.d() {
        let col = d.y.column(j);
        let m = col.sum() / n;
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        let sd = var.sqrt();
        if sd > 0.0 && sd.is_finite() {
            scale.push(sd);
        } else {
            warn!("column {} has zero variance; scale set to 1", j + 1);
            scale.push(1.0);
        }
        mean.push(m);
    }
    let st = Standardization { mean, scale };
    let mut out = d.clone();
    out.y = st.apply(&d.y);
    (out, st)
}

/// Which column of a CSV file holds the category.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LabelColumn {
    Name(String),
    Index(usize),
}

impl From<&str> for LabelColumn {
    fn from(s: &str) -> Self {
        LabelColumn::Name(s.to_string())
    }
}

/// Reads a UTF-8 CSV with a header row. Label values are mapped to `1..=C`
/// in order of first appearance.
pub fn load_csv(path: impl AsRef<Path>, label_column: &LabelColumn) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into());
    read_csv(file, label_column, &name)
}

pub fn read_csv<R: Read>(reader: R, label_column: &LabelColumn, name: &str) -> Result<Dataset> {
    let table = read_table(reader, Some(label_column), true)?;
    let mut labels = Vec::with_capacity(table.y.nrows());
    let mut label_names: Vec<String> = Vec::new();
    let mut index: HashMap<String, u32> = HashMap::new();
    for raw in table.labels.unwrap_or_default() {
        let next = label_names.len() as u32 + 1;
        let id = *index.entry(raw.clone()).or_insert_with(|| {
            label_names.push(raw);
            next
        });
        labels.push(CategoryLabel(id));
    }
    let ds = Dataset {
        y: table.y,
        labels,
        category_count: label_names.len(),
        name: name.to_string(),
        label_names,
        feature_names: table.feature_names,
        label_column: table.label_column,
    };
    ds.validate()?;
    Ok(ds)
}

/// Numeric columns of a CSV plus the raw values of its label column, if any.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub y: DMatrix<f64>,
    pub feature_names: Vec<String>,
    pub label_column: Option<String>,
    pub labels: Option<Vec<String>>,
}

/// Reads a CSV whose label column is optional: when `label_column` names a
/// column that exists it is split off, otherwise every column is a feature.
pub fn read_features<R: Read>(reader: R, label_column: Option<&LabelColumn>) -> Result<FeatureTable> {
    read_table(reader, label_column, false)
}

fn read_table<R: Read>(reader: R, label_column: Option<&LabelColumn>, required: bool) -> Result<FeatureTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| SclvmError::data(format!("cannot read CSV header: {e}")))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let label_idx = match label_column {
        Some(LabelColumn::Name(n)) => match headers.iter().position(|h| h == n) {
            Some(i) => Some(i),
            None if required => {
                return Err(SclvmError::data(format!("label column '{n}' not found in header")))
            }
            None => None,
        },
        Some(LabelColumn::Index(i)) => {
            if *i >= headers.len() {
                return Err(SclvmError::data(format!(
                    "label column index {i} out of range for {} columns",
                    headers.len()
                )));
            }
            Some(*i)
        }
        None => None,
    };
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != label_idx)
        .map(|(_, h)| h.clone())
        .collect();
    let d = feature_names.len();

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut n = 0;
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| SclvmError::data(format!("row {row}: {e}")))?;
        if rec.len() != headers.len() {
            return Err(SclvmError::data(format!(
                "row {row}: expected {} fields, found {}",
                headers.len(),
                rec.len()
            )));
        }
        for (j, field) in rec.iter().enumerate() {
            let field = field.trim();
            if Some(j) == label_idx {
                if field.is_empty() {
                    return Err(SclvmError::data(format!("row {row}: missing label")));
                }
                labels.push(field.to_string());
                continue;
            }
            if field.is_empty() {
                return Err(SclvmError::data(format!(
                    "row {row}, column '{}': missing value",
                    headers[j]
                )));
            }
            let v: f64 = field.parse().map_err(|_| {
                SclvmError::data(format!(
                    "row {row}, column '{}': cannot parse '{field}' as a number",
                    headers[j]
                ))
            })?;
            if !v.is_finite() {
                return Err(SclvmError::data(format!(
                    "row {row}, column '{}': non-finite value",
                    headers[j]
                )));
            }
            values.push(v);
        }
        n += 1;
    }
    Ok(FeatureTable {
        y: DMatrix::from_row_slice(n, d, &values),
        feature_names,
        label_column: label_idx.map(|i| headers[i].clone()),
        labels: label_idx.map(|_| labels),
    })
}

/// Writes features followed by the label column (source names).
pub fn write_csv<W: Write>(d: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let label_col = d.label_column.clone().unwrap_or_else(|| "label".into());
    let mut header = d.feature_names.clone();
    header.push(label_col);
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..d.n() {
        let mut rec: Vec<String> = d.y.row(i).iter().map(|v| format!("{v:?}")).collect();
        rec.push(d.label_names[d.labels[i].index()].clone());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> SclvmError {
    SclvmError::data(e.to_string())
}

const BINARY_MAGIC: &[u8; 4] = b"SCLD";
const BINARY_VERSION: u32 = 1;

/// Binary container: magic `SCLD`, u32 version, u64 N, u64 D, u64 C,
/// N·D little-endian f64 in row-major order, then N u32 labels.
pub fn write_binary<W: Write>(d: &Dataset, mut w: W) -> Result<()> {
    w.write_all(BINARY_MAGIC)?;
    w.write_all(&BINARY_VERSION.to_le_bytes())?;
    for v in [d.n() as u64, d.d() as u64, d.category_count as u64] {
        w.write_all(&v.to_le_bytes())?;
    }
    for i in 0..d.n() {
        for v in d.y.row(i).iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for l in &d.labels {
        w.write_all(&l.0.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_binary<R: Read>(mut r: R, name: &str) -> Result<Dataset> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != BINARY_MAGIC {
        return Err(SclvmError::data("not an SCLD container"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != BINARY_VERSION {
        return Err(SclvmError::data(format!("unsupported SCLD version {version}")));
    }
    let mut b8 = [0u8; 8];
    let mut read_u64 = |r: &mut R| -> Result<usize> {
        r.read_exact(&mut b8)?;
        Ok(u64::from_le_bytes(b8) as usize)
    };
    let n = read_u64(&mut r)?;
    let d = read_u64(&mut r)?;
    let c = read_u64(&mut r)?;
    let mut values = Vec::with_capacity(n * d);
    let mut f = [0u8; 8];
    for _ in 0..n * d {
        r.read_exact(&mut f)?;
        values.push(f64::from_le_bytes(f));
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b4)?;
        labels.push(CategoryLabel(u32::from_le_bytes(b4)));
    }
    Dataset::new(DMatrix::from_row_slice(n, d, &values), labels, c, name)
}

/// Result of [`imbalanced_split`], with the source row indices of each part.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Train on `minority_fraction` of every non-majority class plus at most
/// `majority_cap` majority rows. The test set gets the remaining minority rows
/// and unused majority rows up to `test_size` rows in total (all remaining
/// majority rows when `test_size` is `None`).
pub fn imbalanced_split(
    d: &Dataset,
    majority_cap: usize,
    minority_fraction: f64,
    test_size: Option<usize>,
    seed: u64,
) -> Result<Split> {
    if !(minority_fraction > 0.0 && minority_fraction <= 1.0) {
        return Err(SclvmError::contract("minority_fraction must lie in (0, 1]"));
    }
    let counts = d.class_counts();
    let majority = counts
        .iter()
        .enumerate()
        .max_by_key(|(i, c)| (**c, std::cmp::Reverse(*i)))
        .map(|(i, _)| i)
        .ok_or_else(|| SclvmError::data("dataset has no categories"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); d.category_count];
    for (i, l) in d.labels.iter().enumerate() {
        by_class[l.index()].push(i);
    }
    let mut train = Vec::new();
    let mut test_minority = Vec::new();
    let mut majority_rest = Vec::new();
    for (c, rows) in by_class.iter_mut().enumerate() {
        rows.shuffle(&mut rng);
        if c == majority {
            let k = majority_cap.min(rows.len());
            train.extend_from_slice(&rows[..k]);
            majority_rest.extend_from_slice(&rows[k..]);
        } else {
            let k = ((rows.len() as f64 * minority_fraction).round() as usize).clamp(1.min(rows.len()), rows.len());
            train.extend_from_slice(&rows[..k]);
            if k == rows.len() {
                return Err(SclvmError::data(format!(
                    "category '{}' has no rows left for the test set",
                    d.label_names[c]
                )));
            }
            test_minority.extend_from_slice(&rows[k..]);
        }
    }
    for (c, rows) in by_class.iter().enumerate() {
        if rows.is_empty() {
            return Err(SclvmError::data(format!("category '{}' is empty", d.label_names[c])));
        }
    }
    let n_major_test = match test_size {
        Some(t) => t.saturating_sub(test_minority.len()).min(majority_rest.len()),
        None => majority_rest.len(),
    };
    let mut test = test_minority;
    test.extend_from_slice(&majority_rest[..n_major_test]);
    if n_major_test == 0 {
        return Err(SclvmError::data("majority category has no rows left for the test set"));
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split {
        train: d.subset(&train, format!("{}-train", d.name)),
        test: d.subset(&test, format!("{}-test", d.name)),
        train_indices: train,
        test_indices: test,
    })
}

/// Random smooth map `x ↦ W sin(A x + b)` from a latent block to data space.
#[derive(Clone, Debug)]
struct SmoothMap {
    a: DMatrix<f64>,
    b: DVector<f64>,
    w: DMatrix<f64>,
}

impl SmoothMap {
    fn random(input: usize, hidden: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut draw = |r: usize, c: usize, sd: f64| DMatrix::from_fn(r, c, |_, _| sd * Distribution::<f64>::sample(&StandardNormal, &mut *rng));
        let a = draw(hidden, input, 1.0);
        let w = draw(output, hidden, (2.0 / hidden as f64).sqrt());
        let b = DVector::from_fn(hidden, |_, _| rng.random::<f64>() * std::f64::consts::TAU);
        SmoothMap { a, b, w }
    }

    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let h = (&self.a * x + &self.b).map(f64::sin);
        &self.w * h
    }
}


/// Ground-truth generator for two-category data with a shared latent block
/// and a class-specific private block.
///
/// Category 1 (`"major"`) and category 2 (`"minor"`) share the map of the
/// shared block. Each category has its own private map, and its private codes
/// are centred at `∓offset/2` along the first private axis.
#[derive(Clone, Debug)]
pub struct SyntheticGenerator {
    pub q_shared: usize,
    pub q_private: usize,
    pub d: usize,
    pub offset: f64,
    pub noise_sd: f64,
    shared_map: SmoothMap,
    private_maps: [SmoothMap; 2],
}

/// Sampled data with the latent codes that produced it.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub shared_codes: DMatrix<f64>,
    pub private_codes: DMatrix<f64>,
}

impl SyntheticGenerator {
    pub fn new(q_shared: usize, q_private: usize, d: usize, offset: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = 8;
        let shared_map = SmoothMap::random(q_shared, hidden, d, &mut rng);
        let private_maps = [
            SmoothMap::random(q_private, hidden, d, &mut rng),
            SmoothMap::random(q_private, hidden, d, &mut rng),
        ];
        SyntheticGenerator {
            q_shared,
            q_private,
            d,
            offset,
            noise_sd: 0.1,
            shared_map,
            private_maps,
        }
    }

    pub fn private_center(&self, class: usize) -> DVector<f64> {
        let sign = if class == 0 { -0.5 } else { 0.5 };
        DVector::from_fn(self.q_private, |i, _| if i == 0 { sign * self.offset } else { 0.0 })
    }

    /// Draws `n_major` rows of category 1 followed by `n_minor` of category 2.
    pub fn sample(&self, n_major: usize, n_minor: usize, seed: u64) -> SyntheticData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, self.noise_sd).expect("valid noise sd");
        let n = n_major + n_minor;
        let mut y = DMatrix::zeros(n, self.d);
        let mut xs = DMatrix::zeros(n, self.q_shared);
        let mut xp = DMatrix::zeros(n, self.q_private);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = usize::from(i >= n_major);
            let s = DVector::from_fn(self.q_shared, |_, _| StandardNormal.sample(&mut rng));
            let p = self.private_center(class) + DVector::from_fn(self.q_private, |_, _| StandardNormal.sample(&mut rng));
            let out = self.shared_map.apply(&s) + self.private_maps[class].apply(&p);
            for j in 0..self.d {
                y[(i, j)] = out[j] + noise.sample(&mut rng);
            }
            xs.row_mut(i).copy_from(&s.transpose());
            xp.row_mut(i).copy_from(&p.transpose());
            labels.push(CategoryLabel(class as u32 + 1));
        }
        let mut dataset = Dataset::new(y, labels, 2, "synthetic").expect("generator output is valid");
        dataset.label_names = vec!["major".into(), "minor".into()];
        dataset.label_column = Some("label".into());
        SyntheticData {
            dataset,
            shared_codes: xs,
            private_codes: xp,
        }
    }
}

/// Imbalanced two-category dataset from a fresh [`SyntheticGenerator`].
pub fn synth_shared_private(
    n_major: usize,
    n_minor: usize,
    q_s: usize,
    q_p: usize,
    d: usize,
    offset: f64,
    seed: u64,
) -> SyntheticData {
    SyntheticGenerator::new(q_s, q_p, d, offset, seed).sample(n_major, n_minor, seed.wrapping_add(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn feature_table_with_optional_label() {
        let with = read_features("a,label,b\n1,x,2\n".as_bytes(), Some(&"label".into())).unwrap();
        assert_eq!(with.feature_names, vec!["a", "b"]);
        assert_eq!(with.labels, Some(vec!["x".to_string()]));
        let without = read_features("a,b\n1,2\n".as_bytes(), Some(&"label".into())).unwrap();
        assert_eq!(without.labels, None);
        assert_eq!(without.y, with.y);
        let empty = read_features("a,b\n".as_bytes(), None).unwrap();
        assert_eq!(empty.y.shape(), (0, 2));
    }

    #[test]
    fn csv_first_appearance_mapping() {
        let text = "a,b,label\n1,2,pos\n3,4,neg\n5,6,pos\n";
        let d = read_csv(text.as_bytes(), &"label".into(), "t").unwrap();
        assert_eq!(d.category_count, 2);
        assert_eq!(d.labels, vec![CategoryLabel(1), CategoryLabel(2), CategoryLabel(1)]);
        assert_eq!(d.label_names, vec!["pos", "neg"]);
        assert_eq!(d.y[(1, 1)], 4.0);
        let by_index = read_csv(text.as_bytes(), &LabelColumn::Index(2), "t").unwrap();
        assert_eq!(by_index, d);
    }

    #[test]
    fn csv_errors_name_row_and_column() {
        let text = "a,b,label\n1,2,pos\n3,x,neg\n";
        let e = read_csv(text.as_bytes(), &"label".into(), "t").unwrap_err().to_string();
        assert!(e.contains("row 2") && e.contains("'b'"), "{e}");
        let missing = "a,b,label\n1,,pos\n";
        let e = read_csv(missing.as_bytes(), &"label".into(), "t").unwrap_err().to_string();
        assert!(e.contains("missing"), "{e}");
        assert!(read_csv(text.as_bytes(), &"nope".into(), "t").is_err());
    }

    #[test]
    fn csv_wide_rows() {
        let mut text = (0..900).map(|j| format!("p{j}")).collect::<Vec<_>>().join(",");
        text.push_str(",label\n");
        for r in 0..2 {
            let row: Vec<String> = (0..900).map(|j| ((r * 900 + j) % 255).to_string()).collect();
            text.push_str(&row.join(","));
            text.push_str(",neg\n");
        }
        let d = read_csv(text.as_bytes(), &"label".into(), "patches").unwrap();
        assert_eq!(d.d(), 900);
        assert_eq!(d.n(), 2);
    }

    #[test]
    fn standardize_examples() {
        let y = DMatrix::from_row_slice(4, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0, 6.0, 5.0]);
        let d = Dataset::new(y.clone(), vec![CategoryLabel(1); 4], 1, "t").unwrap();
        let (s, st) = standardize(&d);
        assert_eq!(st.scale[1], 1.0);
        assert!(s.y.column(1).iter().all(|v| *v == 0.0));
        assert_relative_eq!(s.y.column(0).sum(), 0.0, epsilon = 1e-12);
        let (s2, _) = standardize(&s);
        for (a, b) in s2.y.iter().zip(s.y.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn split_matches_reported_sizes() {
        // 550 positive vs 146,012 negative, 80% / 5000 cap.
        let n = 550 + 146_012;
        let labels: Vec<_> = (0..n).map(|i| CategoryLabel(if i < 550 { 2 } else { 1 })).collect();
        let d = Dataset::new(DMatrix::zeros(n, 1), labels, 2, "amida").unwrap();
        let s = imbalanced_split(&d, 5000, 0.8, Some(1000), 0).unwrap();
        assert_eq!(s.train.n(), 5440);
        assert_eq!(s.test.n(), 1000);
        assert_eq!(s.test.class_counts()[1], 110);
        let again = imbalanced_split(&d, 5000, 0.8, Some(1000), 0).unwrap();
        assert_eq!(s.train_indices, again.train_indices);
        assert_eq!(s.test_indices, again.test_indices);
    }

    #[test]
    fn split_boundary_errors() {
        let labels: Vec<_> = (0..20).map(|i| CategoryLabel(if i < 4 { 2 } else { 1 })).collect();
        let d = Dataset::new(DMatrix::zeros(20, 1), labels, 2, "t").unwrap();
        assert!(imbalanced_split(&d, 100, 1.0, None, 0).is_err());
        assert!(imbalanced_split(&d, 16, 0.5, None, 0).is_err());
        assert!(imbalanced_split(&d, 5, 0.0, None, 0).is_err());
    }

    #[test]
    fn binary_round_trip() {
        let d = synth_shared_private(5, 3, 1, 1, 4, 1.0, 2).dataset;
        let mut buf = Vec::new();
        write_binary(&d, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"SCLD");
        let back = read_binary(&buf[..], "synthetic").unwrap();
        assert_eq!(back.y, d.y);
        assert_eq!(back.labels, d.labels);
        assert!(read_binary(&b"XXXX"[..], "x").is_err());
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = synth_shared_private(50, 5, 2, 2, 6, 1.0, 9);
        let b = synth_shared_private(50, 5, 2, 2, 6, 1.0, 9);
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.dataset.class_counts(), vec![50, 5]);
        assert_eq!(a.shared_codes.shape(), (55, 2));
    }

    #[test]
    fn zero_offset_centres_coincide() {
        let g = SyntheticGenerator::new(2, 2, 5, 0.0, 1);
        assert_eq!(g.private_center(0), g.private_center(1));
    }

    proptest! {
        #[test]
        fn standardize_inverse_round_trip(vals in prop::collection::vec(-1e3..1e3f64, 12)) {
            let y = DMatrix::from_row_slice(4, 3, &vals);
            let d = Dataset::new(y.clone(), vec![CategoryLabel(1); 4], 1, "p").unwrap();
            let (s, st) = standardize(&d);
            let back = st.invert(&s.y);
            for (a, b) in back.iter().zip(y.iter()) {
                prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn split_is_disjoint(seed in 0u64..1000, cap in 5usize..40) {
            let labels: Vec<_> = (0..60).map(|i| CategoryLabel(if i % 6 == 0 { 2 } else { 1 })).collect();
            let d = Dataset::new(DMatrix::zeros(60, 1), labels, 2, "t").unwrap();
            let s = imbalanced_split(&d, cap, 0.6, None, seed).unwrap();
            for i in &s.train_indices {
                prop_assert!(!s.test_indices.contains(i));
            }
        }

        #[test]
        fn label_mapping_is_bijective(raw in prop::collection::vec(0u8..5, 1..30)) {
            let mut text = String::from("x,label\n");
            for (i, r) in raw.iter().enumerate() {
                text.push_str(&format!("{i},c{r}\n"));
            }
            let d = read_csv(text.as_bytes(), &"label".into(), "p").unwrap();
            for (l, r) in d.labels.iter().zip(&raw) {
                prop_assert_eq!(&d.label_names[l.index()], &format!("c{r}"));
            }
            let mut distinct = raw.clone();
            distinct.sort();
            distinct.dedup();
            prop_assert_eq!(d.category_count, distinct.len());
        }
    }
}
