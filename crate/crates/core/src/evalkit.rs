//! Evaluation protocols: removal-and-retrain, pruning, noisy-label
//! detection and a runtime benchmark of grouped against per-point
//! attribution.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attributors::{influence, AttributionScores, PropertyFn};
use crate::datahub::{write_atomic, CorruptionRecord, Dataset};
use crate::error::{Error, Result};
use crate::grouping::{random_partition, Partition};
use crate::hessians::HessianStrategy;
use crate::models::{train_on, Architecture, ModelState, TrainConfig};
use crate::numkit::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Highest scores first.
    TopFirst,
    /// Lowest scores first.
    BottomFirst,
}

/// Train positions to delete, resolved from a group ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct RemovalPlan {
    pub direction: Direction,
    pub fraction: f64,
    /// Group ids in removal order.
    pub order: Vec<usize>,
    /// Sorted train positions to remove.
    pub indices: Vec<usize>,
    /// Groups removed in full.
    pub whole_groups: usize,
    /// Points drawn at random from the boundary group.
    pub sampled: usize,
}

/// `round(fraction · n)`.
pub fn removal_budget(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).round() as usize).min(n)
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid(format!("removal fraction {fraction} outside [0, 1)")));
    }
    Ok(())
}

/// Orders groups by score (ties by lower group id), removes whole groups
/// until the budget, then samples the remainder from the boundary group.
pub fn plan_removal(
    part: &Partition,
    scores: &[f64],
    fraction: f64,
    direction: Direction,
    rng: &mut Rng,
) -> Result<RemovalPlan> {
    check_fraction(fraction)?;
    if scores.len() != part.k() {
        return Err(Error::DimensionMismatch {
            expected: part.k(),
            got: scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..part.k()).collect();
    order.sort_by(|&a, &b| {
        let c = match direction {
            Direction::TopFirst => scores[b].total_cmp(&scores[a]),
            Direction::BottomFirst => scores[a].total_cmp(&scores[b]),
        };
        c.then(a.cmp(&b))
    });
    let budget = removal_budget(part.n_points(), fraction);
    let mut indices = Vec::with_capacity(budget);
    let mut whole_groups = 0;
    let mut sampled = 0;
    for &gid in &order {
        let remaining = budget - indices.len();
        if remaining == 0 {
            break;
        }
        let members = &part.groups[gid];
        if members.len() <= remaining {
            indices.extend_from_slice(members);
            whole_groups += 1;
        } else {
            let pick = index::sample(rng, members.len(), remaining);
            indices.extend(pick.iter().map(|i| members[i]));
            sampled = remaining;
        }
    }
    indices.sort_unstable();
    Ok(RemovalPlan {
        direction,
        fraction,
        order,
        indices,
        whole_groups,
        sampled,
    })
}

pub fn build_removal_plan(
    scores: &AttributionScores,
    fraction: f64,
    direction: Direction,
    rng: &mut Rng,
) -> Result<RemovalPlan> {
    plan_removal(&scores.partition, &scores.scores, fraction, direction, rng)
}

/// Uniformly random removal of `round(fraction·n_train)` points.
pub fn random_removal_plan(n_train: usize, fraction: f64, rng: &mut Rng) -> Result<RemovalPlan> {
    check_fraction(fraction)?;
    let budget = removal_budget(n_train, fraction);
    let mut indices = index::sample(rng, n_train, budget).into_vec();
    indices.sort_unstable();
    let mut order: Vec<usize> = (0..n_train).collect();
    order.shuffle(rng);
    Ok(RemovalPlan {
        direction: Direction::TopFirst,
        fraction,
        order,
        indices,
        whole_groups: 0,
        sampled: budget,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub fraction: f64,
    pub mean: f64,
    pub stderr: f64,
    pub n_seeds: usize,
    pub runtime_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    /// Full-data value (fraction 0).
    pub baseline: Option<EvalRow>,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `metric,fraction,mean,stderr,n_seeds,runtime_s`; the baseline comes first.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,fraction,mean,stderr,n_seeds,runtime_s\n");
        for r in self.baseline.iter().chain(&self.rows) {
            let _ = writeln!(
                out,
                "{},{:?},{:?},{:?},{},{:?}",
                self.metric, r.fraction, r.mean, r.stderr, r.n_seeds, r.runtime_s
            );
        }
        out
    }

    /// Writes `<stem>.json` and `<stem>.csv`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        write_atomic(dir.join(format!("{stem}.json")), self.to_json()?.as_bytes())?;
        write_atomic(dir.join(format!("{stem}.csv")), self.to_csv().as_bytes())
    }
}

/// Mean and standard error (sample std / √n; 0 for one value).
pub fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Training seeds for `n_seeds` replicates derived from `cfg.seed`.
pub fn replicate_seeds(cfg: &TrainConfig, n_seeds: usize) -> Vec<u64> {
    (0..n_seeds as u64)
        .map(|r| numkit::derive_seed(cfg.seed, &[r]))
        .collect()
}

/// Test accuracy after retraining without `removed` (train positions), one
/// value per seed.
pub fn retrain_accuracies(
    arch: &Architecture,
    ds: &Dataset,
    cfg: &TrainConfig,
    removed: &[usize],
    seeds: &[u64],
) -> Result<Vec<f64>> {
    let rows = ds.train_rows_without(removed);
    if rows.is_empty() {
        return Err(Error::invalid("removal plan leaves no training rows"));
    }
    seeds
        .par_iter()
        .map(|&s| {
            let (m, _) = train_on(arch, ds, &rows, &cfg.with_seed(s), 0)?;
            Ok(m.accuracy(ds, ds.test_rows()))
        })
        .collect()
}

fn eval_row(fraction: f64, accs: &[f64], started: Instant) -> EvalRow {
    let (mean, stderr) = mean_stderr(accs);
    EvalRow {
        fraction,
        mean,
        stderr,
        n_seeds: accs.len(),
        runtime_s: started.elapsed().as_secs_f64(),
    }
}

/// Retrains after applying `plan`; returns the post-removal row.
pub fn evaluate_plan(
    plan: &RemovalPlan,
    arch: &Architecture,
    ds: &Dataset,
    cfg: &TrainConfig,
    n_seeds: usize,
) -> Result<EvalRow> {
    if n_seeds == 0 {
        return Err(Error::invalid("n_seeds must be ≥ 1"));
    }
    let t = Instant::now();
    let accs = retrain_accuracies(arch, ds, cfg, &plan.indices, &replicate_seeds(cfg, n_seeds))?;
    Ok(eval_row(plan.fraction, &accs, t))
}

fn baseline_row(arch: &Architecture, ds: &Dataset, cfg: &TrainConfig, n_seeds: usize) -> Result<EvalRow> {
    let t = Instant::now();
    let accs = retrain_accuracies(arch, ds, cfg, &[], &replicate_seeds(cfg, n_seeds))?;
    Ok(eval_row(0.0, &accs, t))
}

#[allow(clippy::too_many_arguments)]
fn removal_report(
    metric: &str,
    direction: Direction,
    scores: &AttributionScores,
    arch: &Architecture,
    ds: &Dataset,
    cfg: &TrainConfig,
    fractions: &[f64],
    n_seeds: usize,
    plan_seed: u64,
) -> Result<EvalReport> {
    if n_seeds == 0 {
        return Err(Error::invalid("n_seeds must be ≥ 1"));
    }
    let baseline = baseline_row(arch, ds, cfg, n_seeds)?;
    let mut rows = Vec::with_capacity(fractions.len());
    for (i, &f) in fractions.iter().enumerate() {
        let mut rng = numkit::rng(numkit::derive_seed(plan_seed, &[i as u64]));
        let plan = build_removal_plan(scores, f, direction, &mut rng)?;
        rows.push(evaluate_plan(&plan, arch, ds, cfg, n_seeds)?);
    }
    Ok(EvalReport {
        metric: metric.to_string(),
        baseline: Some(baseline),
        rows,
    })
}

/// Removes the highest-scored groups at each fraction and retrains. Lower
/// post-removal accuracy indicates better attribution.
pub fn retraining_score(
    scores: &AttributionScores,
    arch: &Architecture,
    ds: &Dataset,
    cfg: &TrainConfig,
    fractions: &[f64],
    n_seeds: usize,
    plan_seed: u64,
) -> Result<EvalReport> {
    removal_report(
        "retrain",
        Direction::TopFirst,
        scores,
        arch,
        ds,
        cfg,
        fractions,
        n_seeds,
        plan_seed,
    )
}

/// Removes the lowest-scored groups at each fraction and retrains. Higher
/// post-pruning accuracy indicates better attribution.
pub fn pruning_eval(
    scores: &AttributionScores,
    arch: &Architecture,
    ds: &Dataset,
    cfg: &TrainConfig,
    fractions: &[f64],
    n_seeds: usize,
    plan_seed: u64,
) -> Result<EvalReport> {
    removal_report(
        "prune",
        Direction::BottomFirst,
        scores,
        arch,
        ds,
        cfg,
        fractions,
        n_seeds,
        plan_seed,
    )
}

/// Control arm: uniformly random removal at each fraction.
pub fn random_removal_eval(
    arch: &Architecture,
    ds: &Dataset,
    cfg: &TrainConfig,
    fractions: &[f64],
    n_seeds: usize,
    plan_seed: u64,
) -> Result<EvalReport> {
    let baseline = baseline_row(arch, ds, cfg, n_seeds)?;
    let mut rows = Vec::with_capacity(fractions.len());
    for (i, &f) in fractions.iter().enumerate() {
        let mut rng = numkit::rng(numkit::derive_seed(plan_seed, &[i as u64]));
        let plan = random_removal_plan(ds.n_train(), f, &mut rng)?;
        rows.push(evaluate_plan(&plan, arch, ds, cfg, n_seeds)?);
    }
    Ok(EvalReport {
        metric: "random".to_string(),
        baseline: Some(baseline),
        rows,
    })
}

/// Area under the detected-flips curve when points are audited in
/// ascending score order (ties by position). `x` advances by `1/n` per
/// point; the curve starts at the origin and uses the trapezoid rule.
pub fn noisy_label_auc_points(point_scores: &[f64], flipped: &[bool]) -> Result<f64> {
    if point_scores.len() != flipped.len() {
        return Err(Error::DimensionMismatch {
            expected: flipped.len(),
            got: point_scores.len(),
        });
    }
    let total = flipped.iter().filter(|&&f| f).count();
    if total == 0 {
        return Err(Error::invalid("no flipped points to detect"));
    }
    let n = point_scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| point_scores[a].total_cmp(&point_scores[b]).then(a.cmp(&b)));
    let mut found = 0usize;
    let mut area = 0.0;
    for &i in &order {
        let before = found as f64 / total as f64;
        if flipped[i] {
            found += 1;
        }
        let after = found as f64 / total as f64;
        area += (before + after) / 2.0;
    }
    Ok(area / n as f64)
}

pub fn noisy_label_auc(scores: &AttributionScores, corruption: &CorruptionRecord) -> Result<f64> {
    let n = scores.partition.n_points();
    if corruption.flipped_indices.iter().any(|&i| i >= n) {
        return Err(Error::invalid(
            "corruption record references positions outside the partition",
        ));
    }
    noisy_label_auc_points(&scores.point_scores(), &corruption.is_flipped(n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub group_size: usize,
    pub median_s: f64,
    pub passes: usize,
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub method: String,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group_size,median_s,passes,speedup\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:?},{},{:?}", r.group_size, r.median_s, r.passes, r.speedup);
        }
        out
    }

    pub fn row(&self, group_size: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.group_size == group_size)
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Times influence attribution over random partitions of each size (median
/// of `reps` runs, strictly serial) and records gradient-pass counts.
/// Speedups are relative to group size 1.
#[allow(clippy::too_many_arguments)]
pub fn bench_da_vs_ggda(
    m: &ModelState,
    ds: &Dataset,
    g: &PropertyFn,
    hs: &HessianStrategy,
    weight_decay: f64,
    group_sizes: &[usize],
    reps: usize,
    seed: u64,
) -> Result<BenchReport> {
    if !group_sizes.contains(&1) {
        return Err(Error::invalid("group sizes must include 1"));
    }
    if reps == 0 {
        return Err(Error::invalid("reps must be ≥ 1"));
    }
    let mut rows = Vec::with_capacity(group_sizes.len());
    for &size in group_sizes {
        let part = if size == 1 {
            Partition::singletons(ds.n_train())
        } else {
            random_partition(ds.n_train(), size.min(ds.n_train()), &mut numkit::rng(seed))?
        };
        let mut times = Vec::with_capacity(reps);
        let mut passes = 0;
        for _ in 0..reps {
            let t = Instant::now();
            let s = influence(m, ds, &part, g, hs, weight_decay, seed)?;
            times.push(t.elapsed().as_secs_f64());
            passes = s.train_passes;
        }
        rows.push(BenchRow {
            group_size: size,
            median_s: median(&mut times),
            passes,
            speedup: 0.0,
        });
    }
    let base = rows
        .iter()
        .find(|r| r.group_size == 1)
        .expect("size 1 present")
        .median_s;
    for r in &mut rows {
        r.speedup = if r.group_size == 1 { 1.0 } else { base / r.median_s };
    }
    Ok(BenchReport {
        method: format!("influence:{}", hs.name()),
        rows,
    })
}
