//! Datasets, synthetic generators, label corruption and score files.
//!
//! Training rows are addressed by their *train position*: the index into
//! [`Dataset::train_rows`]. Partitions, corruption records and removal plans
//! all use train positions; model code uses absolute row indices.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Mat, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    features: Mat,
    labels: Vec<usize>,
    split: Vec<Split>,
    num_classes: usize,
    train_rows: Vec<usize>,
    test_rows: Vec<usize>,
}

impl Dataset {
    /// Builds a dataset. `num_classes` defaults to `max(label) + 1`.
    pub fn new(
        name: impl Into<String>,
        features: Mat,
        labels: Vec<usize>,
        split: Vec<Split>,
        num_classes: Option<usize>,
    ) -> Result<Self> {
        let n = features.nrows();
        if labels.len() != n || split.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: labels.len().min(split.len()),
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("dataset features must be finite"));
        }
        let inferred = labels.iter().max().map_or(1, |m| m + 1);
        let num_classes = num_classes.unwrap_or(inferred);
        if inferred > num_classes {
            return Err(Error::invalid(format!(
                "label {} outside 0..{num_classes}",
                inferred - 1
            )));
        }
        let train_rows = (0..n).filter(|&i| split[i] == Split::Train).collect();
        let test_rows = (0..n).filter(|&i| split[i] == Split::Test).collect();
        Ok(Self {
            name: name.into(),
            features,
            labels,
            split,
            num_classes,
            train_rows,
            test_rows,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn features(&self) -> &Mat {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn split(&self) -> &[Split] {
        &self.split
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    /// Absolute row indices of the training split, ascending.
    pub fn train_rows(&self) -> &[usize] {
        &self.train_rows
    }

    /// Absolute row indices of the test split, ascending.
    pub fn test_rows(&self) -> &[usize] {
        &self.test_rows
    }

    pub fn n_train(&self) -> usize {
        self.train_rows.len()
    }

    pub fn n_test(&self) -> usize {
        self.test_rows.len()
    }

    /// Maps train positions to absolute rows.
    pub fn train_rows_at(&self, positions: &[usize]) -> Vec<usize> {
        positions.iter().map(|&p| self.train_rows[p]).collect()
    }

    /// Absolute train rows whose positions are not in `removed`.
    pub fn train_rows_without(&self, removed: &[usize]) -> Vec<usize> {
        let removed: BTreeSet<usize> = removed.iter().copied().collect();
        self.train_rows
            .iter()
            .enumerate()
            .filter(|(pos, _)| !removed.contains(pos))
            .map(|(_, &r)| r)
            .collect()
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Copy with the given train-position labels replaced.
    fn with_train_labels(&self, replacements: &[(usize, usize)]) -> Self {
        let mut out = self.clone();
        for &(pos, label) in replacements {
            out.labels[self.train_rows[pos]] = label;
        }
        out
    }

    /// Writes the dataset as CSV with columns `x0..x{d-1},label,split`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            let mut header: Vec<String> = (0..self.num_features()).map(|j| format!("x{j}")).collect();
            header.push("label".into());
            header.push("split".into());
            w.write_record(&header)?;
            for i in 0..self.len() {
                let mut rec: Vec<String> = self.row(i).iter().map(|v| format!("{v:?}")).collect();
                rec.push(self.labels[i].to_string());
                rec.push(match self.split[i] {
                    Split::Train => "train".into(),
                    Split::Test => "test".into(),
                });
                w.write_record(&rec)?;
            }
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        write_atomic(path, &buf)
    }
}

/// Reads a CSV dataset.
///
/// Every column other than `label_column` (and an optional `split` column with
/// values `train`/`test`) must be numeric and becomes a feature, in header
/// order. Without a `split` column the rows get a stratified 80/20 split with
/// a fixed seed.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Schema(format!("{other:?}")),
        })?;
    let headers = reader.headers()?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::MissingColumn(label_column.to_string()))?;
    let split_idx = headers.iter().position(|h| h == "split");
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&c| c != label_idx && Some(c) != split_idx)
        .collect();

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        for &c in &feature_cols {
            let cell = rec.get(c).unwrap_or("");
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: headers[c].to_string(),
                message: format!("non-numeric cell `{cell}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: headers[c].to_string(),
                    message: format!("non-finite value `{cell}`"),
                });
            }
            values.push(v);
        }
        let cell = rec.get(label_idx).unwrap_or("");
        let label: usize = cell.parse().map_err(|_| Error::Parse {
            row,
            column: label_column.to_string(),
            message: format!("label `{cell}` is not a non-negative integer"),
        })?;
        labels.push(label);
        if let Some(s) = split_idx {
            splits.push(match rec.get(s).unwrap_or("") {
                "train" => Split::Train,
                "test" => Split::Test,
                other => {
                    return Err(Error::Parse {
                        row,
                        column: "split".into(),
                        message: format!("expected `train` or `test`, got `{other}`"),
                    })
                }
            });
        }
    }
    let n = labels.len();
    let features = Array2::from_shape_vec((n, feature_cols.len()), values).map_err(|e| Error::Schema(e.to_string()))?;
    let split = if split_idx.is_some() {
        splits
    } else {
        stratified_split(&labels, 0.8, &mut crate::numkit::rng(0))
    };
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(name, features, labels, split, None)
}

/// Per class, shuffles the class's rows and tags `round(train_frac·count)` of them as train.
pub fn stratified_split(labels: &[usize], train_frac: f64, rng: &mut Rng) -> Vec<Split> {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut split = vec![Split::Test; labels.len()];
    for c in 0..classes {
        let mut rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        rows.shuffle(rng);
        let n_train = (train_frac * rows.len() as f64).round() as usize;
        for &i in &rows[..n_train] {
            split[i] = Split::Train;
        }
    }
    split
}

/// Gaussian blobs with unit covariance, one centroid per class, centroids at
/// pairwise distance ≥ `separation`, stratified 80/20 split.
pub fn make_blobs(n: usize, d: usize, classes: usize, separation: f64, rng: &mut Rng) -> Result<Dataset> {
    if classes == 0 || n < classes || d == 0 {
        return Err(Error::invalid(format!(
            "make_blobs needs n ≥ classes ≥ 1 and d ≥ 1 (n={n}, classes={classes}, d={d})"
        )));
    }
    let centroids = blob_centroids(d, classes, separation, rng);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let features = Mat::from_shape_fn((n, d), |(i, j)| {
        let z: f64 = StandardNormal.sample(rng);
        centroids[[labels[i], j]] + z
    });
    let split = stratified_split(&labels, 0.8, rng);
    Dataset::new(
        format!("blobs-{n}x{d}-c{classes}"),
        features,
        labels,
        split,
        Some(classes),
    )
}

fn blob_centroids(d: usize, classes: usize, separation: f64, rng: &mut Rng) -> Mat {
    let mut c = Mat::zeros((classes, d));
    if classes <= d {
        // scaled basis vectors: every pair is exactly `separation` apart
        for k in 0..classes {
            c[[k, k]] = separation / std::f64::consts::SQRT_2;
        }
        return c;
    }
    let mut radius = separation.max(1e-12) * (classes as f64).sqrt();
    let mut placed = 0;
    let mut attempts = 0;
    while placed < classes {
        let cand: Vec<f64> = (0..d).map(|_| rng.random_range(-radius..radius)).collect();
        let ok = (0..placed).all(|k| {
            let dist2: f64 = (0..d).map(|j| (c[[k, j]] - cand[j]).powi(2)).sum();
            dist2.sqrt() >= separation
        });
        if ok {
            for j in 0..d {
                c[[placed, j]] = cand[j];
            }
            placed += 1;
        }
        attempts += 1;
        if attempts % 1000 == 0 {
            radius *= 1.5;
        }
    }
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRecord {
    /// Train positions whose labels were flipped, ascending.
    pub flipped_indices: Vec<usize>,
    /// Original labels, aligned with `flipped_indices`.
    pub original_labels: Vec<usize>,
    pub fraction: f64,
}

impl CorruptionRecord {
    pub fn is_flipped(&self, n_train: usize) -> Vec<bool> {
        let mut mask = vec![false; n_train];
        for &i in &self.flipped_indices {
            mask[i] = true;
        }
        mask
    }
}

/// Flips `round(fraction·n_train)` train labels, each to a uniformly chosen
/// different class. Test rows and features are untouched.
pub fn flip_labels(ds: &Dataset, fraction: f64, rng: &mut Rng) -> Result<(Dataset, CorruptionRecord)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("flip fraction {fraction} outside (0, 1)")));
    }
    let c = ds.num_classes();
    if c < 2 {
        return Err(Error::invalid("label flipping needs at least two classes"));
    }
    let n_train = ds.n_train();
    let count = (fraction * n_train as f64).round() as usize;
    let mut chosen = index::sample(rng, n_train, count).into_vec();
    chosen.sort_unstable();
    let mut replacements = Vec::with_capacity(count);
    let mut original = Vec::with_capacity(count);
    for &pos in &chosen {
        let old = ds.labels()[ds.train_rows()[pos]];
        let mut new = rng.random_range(0..c - 1);
        if new >= old {
            new += 1;
        }
        original.push(old);
        replacements.push((pos, new));
    }
    let corrupted = ds
        .with_train_labels(&replacements)
        .with_name(format!("{}-flip{fraction}", ds.name()));
    Ok((
        corrupted,
        CorruptionRecord {
            flipped_indices: chosen,
            original_labels: original,
            fraction,
        },
    ))
}

/// Attribution scores together with the partition they refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreFile {
    pub method: String,
    pub grouping: String,
    pub group_size: usize,
    pub seed: u64,
    pub scores: Vec<f64>,
    /// Train positions per group.
    pub group_members: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct ScoreFileJson {
    method: String,
    grouping: String,
    group_size: usize,
    seed: u64,
    groups: Vec<GroupJson>,
}

#[derive(Serialize, Deserialize)]
struct GroupJson {
    id: usize,
    members: Vec<usize>,
    score: Option<f64>,
}

impl ScoreFile {
    pub fn validate(&self) -> Result<()> {
        if self.group_members.is_empty() {
            return Err(Error::Schema("score file needs at least one group".into()));
        }
        if self.scores.len() != self.group_members.len() {
            return Err(Error::Schema(format!(
                "{} scores for {} groups",
                self.scores.len(),
                self.group_members.len()
            )));
        }
        if let Some(bad) = self.scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Schema(format!("score of group {bad} is not finite")));
        }
        let mut seen = BTreeSet::new();
        for (g, members) in self.group_members.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Schema(format!("group {g} is empty")));
            }
            for &m in members {
                if !seen.insert(m) {
                    return Err(Error::Schema(format!("index {m} appears in more than one group")));
                }
            }
        }
        let n = seen.len();
        if seen.iter().next_back().is_some_and(|&max| max + 1 != n) {
            return Err(Error::Schema(format!(
                "group members do not cover train positions 0..{n}"
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        let doc = ScoreFileJson {
            method: self.method.clone(),
            grouping: self.grouping.clone(),
            group_size: self.group_size,
            seed: self.seed,
            groups: self
                .group_members
                .iter()
                .zip(&self.scores)
                .enumerate()
                .map(|(id, (members, &score))| GroupJson {
                    id,
                    members: members.clone(),
                    score: Some(score),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut doc: ScoreFileJson = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        doc.groups.sort_by_key(|g| g.id);
        if doc.groups.iter().enumerate().any(|(i, g)| g.id != i) {
            return Err(Error::Schema("group ids must be 0..k without gaps".into()));
        }
        let scores = doc
            .groups
            .iter()
            .map(|g| {
                g.score
                    .ok_or_else(|| Error::Schema(format!("group {} has no score", g.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let sf = ScoreFile {
            method: doc.method,
            grouping: doc.grouping,
            group_size: doc.group_size,
            seed: doc.seed,
            scores,
            group_members: doc.groups.into_iter().map(|g| g.members).collect(),
        };
        sf.validate()?;
        Ok(sf)
    }

    /// `group_id,score,size` rows for plotting.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["group_id", "score", "size"])?;
        for (id, (members, score)) in self.group_members.iter().zip(&self.scores).enumerate() {
            w.write_record([id.to_string(), format!("{score:?}"), members.len().to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Schema(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Writes `<path>` (JSON) and the companion `<path>.csv`.
pub fn write_scores(sf: &ScoreFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_atomic(path, sf.to_json()?.as_bytes())?;
    write_atomic(path.with_extension("csv"), sf.to_csv()?.as_bytes())
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<ScoreFile> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ScoreFile::from_json(&text)
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
