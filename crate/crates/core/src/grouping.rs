//! Partitions of the training set into disjoint groups.
//!
//! Group members are train positions: indices into `Dataset::train_rows()`.

use std::path::Path;

use ndarray::{ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datahub::{write_atomic, Dataset};
use crate::error::{Error, Result};
use crate::models::ModelState;
use crate::numkit::{self, Mat, Rng, DEFAULT_WHITEN_EPS};

pub const KMEANS_TOL: f64 = 1e-3;
pub const KMEANS_MAX_ITER: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingMethod {
    Random,
    #[serde(rename = "kmeans")]
    KMeans,
    #[serde(rename = "repr_kmeans")]
    ReprKMeans,
    #[serde(rename = "grad_kmeans")]
    GradKMeans,
}

impl GroupingMethod {
    pub fn parse(name: &str) -> Result<Self> {
        [
            GroupingMethod::Random,
            GroupingMethod::KMeans,
            GroupingMethod::ReprKMeans,
            GroupingMethod::GradKMeans,
        ]
        .into_iter()
        .find(|m| m.name() == name)
        .ok_or_else(|| Error::Schema(format!("unknown grouping method {name:?}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            GroupingMethod::Random => "random",
            GroupingMethod::KMeans => "kmeans",
            GroupingMethod::ReprKMeans => "repr_kmeans",
            GroupingMethod::GradKMeans => "grad_kmeans",
        }
    }

    /// Feature space clustered by this method, if any.
    pub fn feature_mode(self) -> Option<FeatureMode> {
        match self {
            GroupingMethod::Random => None,
            GroupingMethod::KMeans => Some(FeatureMode::Raw),
            GroupingMethod::ReprKMeans => Some(FeatureMode::Repr),
            GroupingMethod::GradKMeans => Some(FeatureMode::Grad),
        }
    }

    pub fn needs_model(self) -> bool {
        matches!(self, GroupingMethod::ReprKMeans | GroupingMethod::GradKMeans)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub method: GroupingMethod,
    pub seed: u64,
    pub target_group_size: usize,
    pub groups: Vec<Vec<usize>>,
}

impl Partition {
    /// Every train position in its own group, in index order.
    pub fn singletons(n_train: usize) -> Self {
        Self {
            method: GroupingMethod::Random,
            seed: 0,
            target_group_size: 1,
            groups: (0..n_train).map(|i| vec![i]).collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.groups.len()
    }

    pub fn n_points(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }

    /// Group id of every train position.
    pub fn assignment(&self) -> Vec<usize> {
        let mut out = vec![usize::MAX; self.n_points()];
        for (g, members) in self.groups.iter().enumerate() {
            for &i in members {
                if i < out.len() {
                    out[i] = g;
                }
            }
        }
        out
    }

    /// Checks that the groups are nonempty, disjoint and cover `0..n_train`.
    pub fn validate(&self, n_train: usize) -> Result<()> {
        let mut seen = vec![false; n_train];
        for (g, members) in self.groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Schema(format!("group {g} is empty")));
            }
            for &i in members {
                if i >= n_train {
                    return Err(Error::Schema(format!("group {g} references position {i} ≥ {n_train}")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Schema(format!("position {i} appears twice")));
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Schema(format!("position {missing} is in no group")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// `⌈n_train / group_size⌉`.
pub fn target_size_to_k(n_train: usize, group_size: usize) -> Result<usize> {
    if group_size == 0 {
        return Err(Error::invalid("group_size must be ≥ 1"));
    }
    Ok(n_train.div_ceil(group_size))
}

/// Shuffles positions and cuts them into consecutive chunks of `group_size`.
pub fn random_partition(n_train: usize, group_size: usize, rng: &mut Rng) -> Result<Partition> {
    if group_size == 0 || group_size > n_train {
        return Err(Error::invalid(format!("group_size {group_size} outside 1..={n_train}")));
    }
    let mut idx: Vec<usize> = (0..n_train).collect();
    idx.shuffle(rng);
    Ok(Partition {
        method: GroupingMethod::Random,
        seed: 0,
        target_group_size: group_size,
        groups: idx.chunks(group_size).map(<[usize]>::to_vec).collect(),
    })
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub assignment: Vec<usize>,
    pub centers: Mat,
    /// Inertia after each Lloyd iteration.
    pub inertia: Vec<f64>,
    pub iterations: usize,
}

impl KMeansFit {
    pub fn into_groups(self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.centers.nrows()];
        for (i, &c) in self.assignment.iter().enumerate() {
            groups[c].push(i);
        }
        groups
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn row_slice<'a>(m: &ArrayView2<'a, f64>, i: usize) -> &'a [f64] {
    (*m).index_axis_move(Axis(0), i).to_slice().expect("standard layout")
}

fn plus_plus_seed(x: &ArrayView2<f64>, k: usize, rng: &mut Rng) -> Mat {
    let n = x.nrows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(row_slice(x, i), row_slice(x, chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    if t < d {
                        pick = i;
                        break;
                    }
                    t -= d;
                }
            }
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&d| d > 0.0).expect("positive total");
            }
            pick
        } else {
            // every point coincides with a chosen center; pick an unused index
            let unused: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            unused[rng.random_range(0..unused.len())]
        };
        chosen.push(next);
        let c = row_slice(x, next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row_slice(x, i), c));
        }
    }
    x.select(Axis(0), &chosen)
}

fn nearest(x: &[f64], centers: &Mat) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centers.axis_iter(Axis(0)).enumerate() {
        let d = sq_dist(x, row.as_slice().expect("standard layout"));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Stops once the largest center displacement is ≤ `tol` or after
/// `max_iter` iterations. Clusters left empty by an assignment step take the
/// point farthest from the center of the currently largest cluster.
pub fn kmeans_fit(features: ArrayView2<f64>, k: usize, tol: f64, max_iter: usize, rng: &mut Rng) -> Result<KMeansFit> {
    let n = features.nrows();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k = {k} outside 1..={n}")));
    }
    if max_iter == 0 {
        return Err(Error::invalid("max_iter must be ≥ 1"));
    }
    let x = features.as_standard_layout().into_owned();
    let xv = x.view();
    let d = x.ncols();
    let mut centers = plus_plus_seed(&xv, k, rng).as_standard_layout().into_owned();
    let mut assignment = vec![0; n];
    let mut dist = vec![0.0; n];
    let mut inertia = Vec::new();
    let mut iterations = 0;

    for _ in 0..max_iter {
        iterations += 1;
        let nearest_all: Vec<(usize, f64)> = (0..n)
            .into_par_iter()
            .map(|i| nearest(x.row(i).as_slice().expect("standard layout"), &centers))
            .collect();
        for (i, (c, dd)) in nearest_all.into_iter().enumerate() {
            assignment[i] = c;
            dist[i] = dd;
        }

        let mut counts = vec![0usize; k];
        for &c in &assignment {
            counts[c] += 1;
        }
        while let Some(empty) = counts.iter().position(|&c| c == 0) {
            let largest = (0..k).fold(0, |b, c| if counts[c] > counts[b] { c } else { b });
            let victim = (0..n)
                .filter(|&i| assignment[i] == largest)
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if dist[b] >= dist[i] => Some(b),
                    _ => Some(i),
                })
                .expect("largest cluster is nonempty");
            assignment[victim] = empty;
            dist[victim] = 0.0;
            counts[largest] -= 1;
            counts[empty] += 1;
            centers.row_mut(empty).assign(&x.row(victim));
        }

        let mut sums = Mat::zeros((k, d));
        for (i, &c) in assignment.iter().enumerate() {
            let mut row = sums.row_mut(c);
            row += &x.row(i);
        }
        for (mut row, &cnt) in sums.axis_iter_mut(Axis(0)).zip(&counts) {
            row /= cnt as f64;
        }
        let shift = sums
            .axis_iter(Axis(0))
            .zip(centers.axis_iter(Axis(0)))
            .map(|(a, b)| sq_dist(a.as_slice().expect("owned"), b.as_slice().expect("owned")).sqrt())
            .fold(0.0, f64::max);
        centers = sums;
        let cost: f64 = (0..n)
            .map(|i| {
                sq_dist(
                    x.row(i).as_slice().expect("standard layout"),
                    centers.row(assignment[i]).as_slice().expect("owned"),
                )
            })
            .sum();
        inertia.push(cost);
        if shift <= tol {
            break;
        }
    }
    Ok(KMeansFit {
        assignment,
        centers,
        inertia,
        iterations,
    })
}

/// k-means partition of the rows of `features` (expected pre-whitened).
pub fn kmeans(features: ArrayView2<f64>, k: usize, tol: f64, max_iter: usize, rng: &mut Rng) -> Result<Partition> {
    let fit = kmeans_fit(features, k, tol, max_iter, rng)?;
    let n = features.nrows();
    Ok(Partition {
        method: GroupingMethod::KMeans,
        seed: 0,
        target_group_size: n.div_ceil(k),
        groups: fit.into_groups(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    Raw,
    Repr,
    Grad,
}

/// Whitened per-train-row features used for clustering.
///
/// `Raw` uses the inputs, `Repr` the last hidden activation and `Grad` the
/// loss gradient with respect to that activation.
pub fn make_features(ds: &Dataset, model: Option<&ModelState>, mode: FeatureMode) -> Result<Mat> {
    let rows = ds.train_rows();
    let raw = match mode {
        FeatureMode::Raw => ds.features().select(Axis(0), rows),
        FeatureMode::Repr | FeatureMode::Grad => {
            let m = model.ok_or_else(|| Error::invalid(format!("{mode:?} features need a trained model")))?;
            if m.arch.input_dim() != ds.num_features() {
                return Err(Error::DimensionMismatch {
                    expected: ds.num_features(),
                    got: m.arch.input_dim(),
                });
            }
            if mode == FeatureMode::Repr {
                m.hidden_repr_rows(ds, rows)
            } else {
                m.penult_grad_rows(ds, rows)
            }
        }
    };
    Ok(numkit::whiten(raw.view(), DEFAULT_WHITEN_EPS))
}

/// Groups the training rows of `ds` into `⌈n_train/group_size⌉` groups.
pub fn group(
    ds: &Dataset,
    model: Option<&ModelState>,
    method: GroupingMethod,
    group_size: usize,
    seed: u64,
) -> Result<Partition> {
    let n = ds.n_train();
    let k = target_size_to_k(n, group_size)?;
    let mut rng = numkit::rng(seed);
    let mut part = match method.feature_mode() {
        None => random_partition(n, group_size.min(n), &mut rng)?,
        Some(mode) => {
            let feats = make_features(ds, model, mode)?;
            kmeans(feats.view(), k, KMEANS_TOL, KMEANS_MAX_ITER, &mut rng)?
        }
    };
    part.method = method;
    part.seed = seed;
    part.target_group_size = group_size;
    Ok(part)
}
