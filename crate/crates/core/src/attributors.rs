//! Group attribution methods: influence functions, TracIn, TRAK and the
//! retraining leave-group-out oracle.
//!
//! A score `τ_j > 0` means removing group `j` is predicted to increase the
//! property `g`; with `g` a test loss, helpful groups score positive. The
//! global `1/n` factor is dropped throughout.

use ndarray::ArrayView1;
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datahub::{Dataset, ScoreFile};
use crate::error::{Error, Result};
use crate::grouping::{GroupingMethod, Partition};
use crate::hessians::{HessianStrategy, InverseHessian, ModelContext, Projection, DEFAULT_FISHER_DAMP};
use crate::models::{train_on, Architecture, Checkpoints, ModelState, PassCounter, TrainConfig};
use crate::numkit::{self, Vector};

/// Upper bound on `k · num_seeds` retrainings for the oracle.
pub const MAX_LOO_RETRAININGS: usize = 10_000;

/// Differentiable property `g(θ)`; indices are test positions
/// (into `Dataset::test_rows()`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PropertyFn {
    TestPointLoss { index: usize },
    MeanTestLoss,
    MeanTestLossOnSubset { indices: Vec<usize> },
}

impl PropertyFn {
    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        let n = ds.n_test();
        let check = |i: usize| {
            if i < n {
                Ok(())
            } else {
                Err(Error::invalid(format!("test position {i} out of range (n_test = {n})")))
            }
        };
        match self {
            PropertyFn::TestPointLoss { index } => check(*index),
            PropertyFn::MeanTestLoss if n == 0 => Err(Error::invalid("dataset has no test rows")),
            PropertyFn::MeanTestLoss => Ok(()),
            PropertyFn::MeanTestLossOnSubset { indices } => {
                if indices.is_empty() {
                    return Err(Error::invalid("property subset is empty"));
                }
                indices.iter().try_for_each(|&i| check(i))
            }
        }
    }

    /// Absolute rows the property averages over.
    pub fn rows(&self, ds: &Dataset) -> Vec<usize> {
        match self {
            PropertyFn::TestPointLoss { index } => vec![ds.test_rows()[*index]],
            PropertyFn::MeanTestLoss => ds.test_rows().to_vec(),
            PropertyFn::MeanTestLossOnSubset { indices } => indices.iter().map(|&i| ds.test_rows()[i]).collect(),
        }
    }
}

pub fn eval_property(g: &PropertyFn, m: &ModelState, ds: &Dataset) -> f64 {
    m.mean_loss(ds, &g.rows(ds))
}

pub fn grad_property(g: &PropertyFn, m: &ModelState, ds: &Dataset) -> Vector {
    let rows = g.rows(ds);
    let mut grad = m.grad_group(ds, &rows);
    if rows.len() > 1 {
        grad /= rows.len() as f64;
    }
    grad
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Influence,
    Tracin,
    Trak,
    Loo,
}

impl Method {
    pub fn parse(name: &str) -> Result<Self> {
        [Method::Influence, Method::Tracin, Method::Trak, Method::Loo]
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| Error::Schema(format!("unknown attribution method {name:?}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Influence => "influence",
            Method::Tracin => "tracin",
            Method::Trak => "trak",
            Method::Loo => "loo",
        }
    }
}

/// One score per group of `partition`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionScores {
    pub method: Method,
    /// Hessian strategy name for influence; empty otherwise.
    pub detail: String,
    pub partition: Partition,
    pub property: PropertyFn,
    pub scores: Vec<f64>,
    pub seed: u64,
    /// Batched training-gradient passes spent on scoring.
    pub train_passes: usize,
}

impl AttributionScores {
    pub fn label(&self) -> String {
        if self.detail.is_empty() {
            self.method.name().to_string()
        } else {
            format!("{}:{}", self.method.name(), self.detail)
        }
    }

    pub fn to_score_file(&self) -> ScoreFile {
        ScoreFile {
            method: self.label(),
            grouping: self.partition.method.name().to_string(),
            group_size: self.partition.target_group_size,
            seed: self.seed,
            scores: self.scores.clone(),
            group_members: self.partition.groups.clone(),
        }
    }

    /// Inverse of [`AttributionScores::to_score_file`]. The partition seed is
    /// not stored in score files and is set to the score seed.
    pub fn from_score_file(sf: &ScoreFile, property: PropertyFn) -> Result<Self> {
        sf.validate()?;
        let (name, detail) = sf.method.split_once(':').unwrap_or((sf.method.as_str(), ""));
        let method = Method::parse(name)?;
        let grouping = GroupingMethod::parse(&sf.grouping)?;
        let partition = Partition {
            method: grouping,
            seed: sf.seed,
            target_group_size: sf.group_size,
            groups: sf.group_members.clone(),
        };
        Ok(Self {
            method,
            detail: detail.to_string(),
            partition,
            property,
            scores: sf.scores.clone(),
            seed: sf.seed,
            train_passes: 0,
        })
    }

    /// Per-train-position score of the group containing it.
    pub fn point_scores(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.partition.n_points()];
        for (members, &s) in self.partition.groups.iter().zip(&self.scores) {
            for &i in members {
                out[i] = s;
            }
        }
        out
    }
}

fn check_partition(part: &Partition, ds: &Dataset) -> Result<()> {
    part.validate(ds.n_train())
}

/// Influence scores for an explicit property gradient `grad_g`.
pub fn influence_from_gradient(
    m: &ModelState,
    ds: &Dataset,
    part: &Partition,
    grad_g: ArrayView1<f64>,
    hs: &HessianStrategy,
    weight_decay: f64,
    seed: u64,
) -> Result<(Vec<f64>, usize)> {
    check_partition(part, ds)?;
    if grad_g.len() != m.num_params() {
        return Err(Error::DimensionMismatch {
            expected: m.num_params(),
            got: grad_g.len(),
        });
    }
    let ctx = ModelContext::new(m, ds, weight_decay);
    let counter = PassCounter::new();
    let grads = m.grad_groups(ds, &ctx.group_rows(part), Some(&counter));
    let mut ih = match hs {
        HessianStrategy::BatchedEmpFisher { .. } => {
            InverseHessian::prepare_with_group_gradients(hs, ctx, &grads, seed)?
        }
        _ => InverseHessian::prepare(hs, ctx, Some(part), seed)?,
    };
    let w = ih.apply(ih.project(grad_g)?.view())?;
    let projected = match ih.fisher() {
        Some(acc) if matches!(hs, HessianStrategy::BatchedEmpFisher { .. }) => acc.basis().clone(),
        _ => ih.project_rows(grads)?,
    };
    let scores = projected.dot(&w).to_vec();
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Divergence("non-finite attribution score".into()));
    }
    Ok((scores, counter.get()))
}

/// `τ_j = ∇g(θ)ᵀ Ĥ⁻¹ ∇ℓ(z_j)` with one inverse application and one batched
/// gradient per group.
pub fn influence(
    m: &ModelState,
    ds: &Dataset,
    part: &Partition,
    g: &PropertyFn,
    hs: &HessianStrategy,
    weight_decay: f64,
    seed: u64,
) -> Result<AttributionScores> {
    g.validate(ds)?;
    let grad_g = grad_property(g, m, ds);
    let (scores, passes) = influence_from_gradient(m, ds, part, grad_g.view(), hs, weight_decay, seed)?;
    Ok(AttributionScores {
        method: Method::Influence,
        detail: hs.name().to_string(),
        partition: part.clone(),
        property: g.clone(),
        scores,
        seed,
        train_passes: passes,
    })
}

/// Identity-Hessian influence summed over checkpoints (uniform weights).
pub fn tracin(ckpts: &Checkpoints, ds: &Dataset, part: &Partition, g: &PropertyFn) -> Result<AttributionScores> {
    if ckpts.states.is_empty() {
        return Err(Error::invalid("TracIn needs at least one checkpoint"));
    }
    g.validate(ds)?;
    let mut total = vec![0.0; part.k()];
    let mut passes = 0;
    for m in &ckpts.states {
        let grad_g = grad_property(g, m, ds);
        let (s, p) = influence_from_gradient(m, ds, part, grad_g.view(), &HessianStrategy::Identity, 0.0, 0)?;
        for (t, v) in total.iter_mut().zip(s) {
            *t += v;
        }
        passes += p;
    }
    Ok(AttributionScores {
        method: Method::Tracin,
        detail: String::new(),
        partition: part.clone(),
        property: g.clone(),
        scores: total,
        seed: 0,
        train_passes: passes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrakParams {
    #[serde(default = "default_members")]
    pub members: usize,
    #[serde(default = "default_subsample")]
    pub subsample_frac: f64,
    #[serde(default)]
    pub projection: Projection,
    #[serde(default = "default_trak_damp")]
    pub damp: f64,
}

fn default_members() -> usize {
    5
}

fn default_subsample() -> f64 {
    0.5
}

fn default_trak_damp() -> f64 {
    DEFAULT_FISHER_DAMP
}

impl Default for TrakParams {
    fn default() -> Self {
        Self {
            members: default_members(),
            subsample_frac: default_subsample(),
            projection: Projection::None,
            damp: default_trak_damp(),
        }
    }
}

impl TrakParams {
    pub fn validate(&self) -> Result<()> {
        if self.members == 0 {
            return Err(Error::invalid("TRAK needs at least one member"));
        }
        if !(self.subsample_frac > 0.0 && self.subsample_frac <= 1.0) {
            return Err(Error::invalid("subsample_frac must be in (0, 1]"));
        }
        if !(self.damp > 0.0) {
            return Err(Error::invalid("TRAK damping must be > 0"));
        }
        Ok(())
    }

    /// Per-member seeds derived from `seed`.
    pub fn member_seeds(&self, seed: u64) -> Vec<u64> {
        (0..self.members as u64)
            .map(|i| numkit::derive_seed(seed, &[i]))
            .collect()
    }
}

/// The subsample and trained model of one TRAK member. Positions are
/// sorted train positions.
pub fn trak_member(
    arch: &Architecture,
    cfg: &TrainConfig,
    ds: &Dataset,
    subsample_frac: f64,
    member_seed: u64,
) -> Result<(Vec<usize>, ModelState)> {
    let n = ds.n_train();
    let positions: Vec<usize> = if subsample_frac >= 1.0 {
        (0..n).collect()
    } else {
        let count = ((subsample_frac * n as f64).round() as usize).clamp(1, n);
        let mut rng = numkit::rng(numkit::derive_seed(member_seed, &[0]));
        let mut p = index::sample(&mut rng, n, count).into_vec();
        p.sort_unstable();
        p
    };
    let rows = ds.train_rows_at(&positions);
    let (model, _) = train_on(arch, ds, &rows, &cfg.with_seed(member_seed), 0)?;
    Ok((positions, model))
}

/// TRAK with explicit member seeds; see [`trak`].
#[allow(clippy::too_many_arguments)]
pub fn trak_with_seeds(
    arch: &Architecture,
    cfg: &TrainConfig,
    ds: &Dataset,
    part: &Partition,
    g: &PropertyFn,
    params: &TrakParams,
    member_seeds: &[u64],
) -> Result<AttributionScores> {
    params.validate()?;
    g.validate(ds)?;
    check_partition(part, ds)?;
    if member_seeds.is_empty() {
        return Err(Error::invalid("TRAK needs at least one member seed"));
    }
    let strategy = HessianStrategy::BatchedEmpFisher {
        projection: params.projection,
        damp: params.damp,
    };
    let mut total = vec![0.0; part.k()];
    let mut passes = 0;
    for &seed in member_seeds {
        let (positions, model) = trak_member(arch, cfg, ds, params.subsample_frac, seed)?;
        let mut keep = vec![false; ds.n_train()];
        for &p in &positions {
            keep[p] = true;
        }
        let groups: Vec<Vec<usize>> = part
            .groups
            .iter()
            .map(|grp| grp.iter().filter(|&&i| keep[i]).map(|&i| ds.train_rows()[i]).collect())
            .collect();
        let rows = ds.train_rows_at(&positions);
        let ctx = ModelContext {
            model: &model,
            ds,
            rows: &rows,
            weight_decay: cfg.weight_decay,
        };
        let counter = PassCounter::new();
        let grads = model.grad_groups(ds, &groups, Some(&counter));
        let mut ih =
            InverseHessian::prepare_with_group_gradients(&strategy, ctx, &grads, numkit::derive_seed(seed, &[1]))?;
        let grad_g = grad_property(g, &model, ds);
        let w = ih.apply(ih.project(grad_g.view())?.view())?;
        let basis = ih.fisher().expect("Fisher strategy").basis();
        for (t, v) in total.iter_mut().zip(basis.dot(&w)) {
            *t += v;
        }
        passes += counter.get();
    }
    let m = member_seeds.len() as f64;
    let scores: Vec<f64> = total.into_iter().map(|t| t / m).collect();
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Divergence("non-finite TRAK score".into()));
    }
    Ok(AttributionScores {
        method: Method::Trak,
        detail: String::new(),
        partition: part.clone(),
        property: g.clone(),
        scores,
        seed: member_seeds[0],
        train_passes: passes,
    })
}

/// Mean over ensemble members of batched-Fisher influence, each member
/// trained on a random subsample. Groups keep their global ids; a member
/// only sees the group members it sampled.
pub fn trak(
    arch: &Architecture,
    cfg: &TrainConfig,
    ds: &Dataset,
    part: &Partition,
    g: &PropertyFn,
    params: &TrakParams,
    seed: u64,
) -> Result<AttributionScores> {
    params.validate()?;
    let mut out = trak_with_seeds(arch, cfg, ds, part, g, params, &params.member_seeds(seed))?;
    out.seed = seed;
    Ok(out)
}

/// Retraining oracle: `τ_j = mean_r [g(θ_{−j,r}) − g(θ_r)]` where `θ_r` is
/// trained on all rows and `θ_{−j,r}` without group `j`, both from the same
/// seed `derive_seed(base_seed, [r])`.
pub fn loo_oracle(
    arch: &Architecture,
    ds: &Dataset,
    part: &Partition,
    g: &PropertyFn,
    cfg: &TrainConfig,
    num_seeds: usize,
    base_seed: u64,
) -> Result<AttributionScores> {
    g.validate(ds)?;
    check_partition(part, ds)?;
    if num_seeds == 0 {
        return Err(Error::invalid("num_seeds must be ≥ 1"));
    }
    let k = part.k();
    if k.saturating_mul(num_seeds) > MAX_LOO_RETRAININGS {
        return Err(Error::invalid(format!(
            "{k} groups × {num_seeds} seeds exceeds {MAX_LOO_RETRAININGS} retrainings"
        )));
    }
    let seeds: Vec<u64> = (0..num_seeds as u64)
        .map(|r| numkit::derive_seed(base_seed, &[r]))
        .collect();
    let full: Vec<f64> = seeds
        .par_iter()
        .map(|&s| {
            let (m, _) = train_on(arch, ds, ds.train_rows(), &cfg.with_seed(s), 0)?;
            Ok(eval_property(g, &m, ds))
        })
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..k).flat_map(|j| (0..num_seeds).map(move |r| (j, r))).collect();
    let deltas: Vec<f64> = jobs
        .par_iter()
        .map(|&(j, r)| {
            let rows = ds.train_rows_without(&part.groups[j]);
            if rows.is_empty() {
                return Err(Error::invalid(format!("removing group {j} leaves no training rows")));
            }
            let (m, _) = train_on(arch, ds, &rows, &cfg.with_seed(seeds[r]), 0)?;
            Ok(eval_property(g, &m, ds) - full[r])
        })
        .collect::<Result<_>>()?;
    let scores = deltas
        .chunks(num_seeds)
        .map(|c| c.iter().sum::<f64>() / num_seeds as f64)
        .collect();
    Ok(AttributionScores {
        method: Method::Loo,
        detail: String::new(),
        partition: part.clone(),
        property: g.clone(),
        scores,
        seed: base_seed,
        train_passes: 0,
    })
}
