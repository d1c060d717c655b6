//! Fixtures and independent reference implementations shared by the
//! integration tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeSet;

use ggda::datahub::{flip_labels, make_blobs, CorruptionRecord, Dataset};
use ggda::grouping::Partition;
use ggda::models::{Architecture, ModelState, Optimizer, TrainConfig};
use ggda::numkit::{rng, Mat, Vector};
use ndarray::{Array1, ArrayView1};
use rand::Rng as _;

/// 40 points in 2-D, two classes, 32 train / 8 test.
pub fn desk_fixture(seed: u64) -> Dataset {
    make_blobs(40, 2, 2, 2.0, &mut rng(seed)).unwrap()
}

/// Deterministic full-batch GD to a tight gradient tolerance.
pub fn convex_cfg() -> TrainConfig {
    TrainConfig {
        learning_rate: 1.0,
        epochs: 20_000,
        batch_size: usize::MAX,
        weight_decay: 1e-2,
        grad_tol: Some(1e-8),
        ..Default::default()
    }
}

/// 1000 blobs in 2-D with 20% of training labels flipped.
pub fn noisy_fixture() -> (Dataset, CorruptionRecord) {
    let clean = make_blobs(1000, 2, 2, 2.0, &mut rng(1)).unwrap();
    flip_labels(&clean, 0.2, &mut rng(2)).unwrap()
}

pub fn noisy_cfg() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.1,
        epochs: 30,
        batch_size: 32,
        weight_decay: 1e-3,
        optimizer: Optimizer::Momentum { beta: 0.9 },
        seed: 0,
        grad_tol: None,
    }
}

pub fn random_model(arch: Architecture, seed: u64, scale: f64) -> ModelState {
    let mut r = rng(seed);
    let theta = Array1::from_iter((0..arch.num_params()).map(|_| r.random_range(-scale..scale)));
    ModelState::new(arch, theta).unwrap()
}

/// Brute-force check that `part` is a disjoint, exhaustive cover of `0..n`
/// by nonempty groups.
pub fn is_partition(part: &Partition, n: usize) -> bool {
    let mut seen = BTreeSet::new();
    for g in &part.groups {
        if g.is_empty() {
            return false;
        }
        for &i in g {
            if i >= n || !seen.insert(i) {
                return false;
            }
        }
    }
    seen.len() == n
}

// Reference logistic regression: θ = [W (C×d row-major), b (C)].

pub fn ref_probs(theta: &[f64], x: ArrayView1<f64>, c: usize) -> Vec<f64> {
    let d = x.len();
    let z: Vec<f64> = (0..c)
        .map(|k| theta[c * d + k] + (0..d).map(|f| theta[k * d + f] * x[f]).sum::<f64>())
        .collect();
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn ref_grad(theta: &[f64], x: ArrayView1<f64>, y: usize, c: usize) -> Vec<f64> {
    let d = x.len();
    let p = ref_probs(theta, x, c);
    let mut g = vec![0.0; c * d + c];
    for k in 0..c {
        let r = p[k] - if k == y { 1.0 } else { 0.0 };
        for f in 0..d {
            g[k * d + f] = r * x[f];
        }
        g[c * d + k] = r;
    }
    g
}

/// Mean-loss Hessian over `rows` plus `wd·I`.
pub fn ref_hessian(theta: &[f64], ds: &Dataset, rows: &[usize], wd: f64) -> Vec<Vec<f64>> {
    let c = ds.num_classes();
    let d = ds.num_features();
    let np = c * d + c;
    let idx = |k: usize, f: usize| if f < d { k * d + f } else { c * d + k };
    let mut h = vec![vec![0.0; np]; np];
    for &r in rows {
        let x = ds.row(r);
        let p = ref_probs(theta, x, c);
        let xt: Vec<f64> = x.iter().cloned().chain([1.0]).collect();
        for a in 0..c {
            for b in 0..c {
                let s = if a == b { p[a] } else { 0.0 } - p[a] * p[b];
                for f in 0..=d {
                    for g in 0..=d {
                        h[idx(a, f)][idx(b, g)] += s * xt[f] * xt[g] / rows.len() as f64;
                    }
                }
            }
        }
    }
    for (i, row) in h.iter_mut().enumerate() {
        row[i] += wd;
    }
    h
}

/// Gaussian elimination with partial pivoting.
pub fn gauss_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .zip(b)
        .map(|(r, &v)| r.iter().cloned().chain([v]).collect())
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        m.swap(col, piv);
        let pivot = m[col].clone();
        for (r, row) in m.iter_mut().enumerate() {
            if r != col {
                let f = row[col] / pivot[col];
                for (x, p) in row[col..].iter_mut().zip(&pivot[col..]) {
                    *x -= f * p;
                }
            }
        }
    }
    (0..n).map(|i| m[i][n] / m[i][i]).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Max relative deviation between two score vectors, scaled by the largest
/// magnitude of the reference.
pub fn max_rel_dev(a: &[f64], reference: &[f64]) -> f64 {
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(reference).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

fn rel_err(a: &Vector, b: &Vector) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let scale = a.mapv(|v| v * v).sum().sqrt().max(b.mapv(|v| v * v).sum().sqrt());
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

pub struct FdReport {
    pub draws: usize,
    pub max_grad_err: f64,
    pub max_hvp_err: f64,
}

pub fn fd_architectures() -> Vec<Architecture> {
    vec![
        Architecture::logreg(3, 2),
        Architecture::logreg(4, 3),
        Architecture::mlp(3, &[5], 2),
        Architecture::mlp(4, &[6, 4], 3),
    ]
}

/// Central finite differences of the loss (gradient) and of the gradient
/// (Hessian-vector product) on `draws` random (θ, x, y) per architecture.
pub fn finite_difference_suite(draws: usize, seed: u64) -> FdReport {
    let mut r = rng(seed);
    let mut max_grad_err = 0.0f64;
    let mut max_hvp_err = 0.0f64;
    let mut total = 0;
    for arch in fd_architectures() {
        let p = arch.num_params();
        let d = arch.input_dim();
        let c = arch.num_classes();
        for _ in 0..draws {
            let theta = Array1::from_iter((0..p).map(|_| r.random_range(-1.0..1.0)));
            let m = ModelState::new(arch.clone(), theta.clone()).unwrap();
            let x = Array1::from_iter((0..d).map(|_| r.random_range(-2.0..2.0)));
            let y = r.random_range(0..c);
            let v = Array1::from_iter((0..p).map(|_| r.random_range(-1.0..1.0)));
            let ds = Dataset::new(
                "fd",
                x.clone().insert_axis(ndarray::Axis(0)),
                vec![y],
                vec![ggda::datahub::Split::Train],
                Some(c),
            )
            .unwrap();

            let h = 1e-5;
            let mut fd = Vector::zeros(p);
            for i in 0..p {
                let mut tp = theta.clone();
                tp[i] += h;
                let mut tm = theta.clone();
                tm[i] -= h;
                let lp = ModelState::new(arch.clone(), tp).unwrap().loss(x.view(), y);
                let lm = ModelState::new(arch.clone(), tm).unwrap().loss(x.view(), y);
                fd[i] = (lp - lm) / (2.0 * h);
            }
            max_grad_err = max_grad_err.max(rel_err(&m.grad_single(x.view(), y), &fd));

            let hh = 1e-5;
            let gp = ModelState::new(arch.clone(), &theta + &(&v * hh))
                .unwrap()
                .grad_single(x.view(), y);
            let gm = ModelState::new(arch.clone(), &theta - &(&v * hh))
                .unwrap()
                .grad_single(x.view(), y);
            let fd_hvp = (gp - gm) / (2.0 * hh);
            max_hvp_err = max_hvp_err.max(rel_err(&m.hvp_sum(&ds, &[0], v.view()), &fd_hvp));
            total += 1;
        }
    }
    FdReport {
        draws: total,
        max_grad_err,
        max_hvp_err,
    }
}

pub fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

/// Deviation of each attributor (singletons, one test point) from its
/// per-sample formula computed with the reference routines above.
pub fn subsumption_deviations(ds: &Dataset, test_index: usize) -> Vec<(&'static str, f64)> {
    use ggda::attributors::{influence, tracin, trak, PropertyFn, TrakParams};
    use ggda::hessians::{HessianStrategy, Projection};
    use ggda::models::train;
    use ggda::numkit::derive_seed;

    let arch = Architecture::logreg(ds.num_features(), ds.num_classes());
    let cfg = convex_cfg();
    let wd = cfg.weight_decay;
    let c = ds.num_classes();
    let (model, _) = train(&arch, ds, &cfg, 0).unwrap();
    let snap_cfg = TrainConfig {
        epochs: 60,
        grad_tol: None,
        learning_rate: 0.5,
        ..cfg.clone()
    };
    let (_, ckpts) = train(&arch, ds, &snap_cfg, 20).unwrap();
    let single = Partition::singletons(ds.n_train());
    let g = PropertyFn::TestPointLoss { index: test_index };
    let test_row = ds.test_rows()[test_index];
    let xt = ds.row(test_row);
    let yt = ds.labels()[test_row];
    let train_rows = ds.train_rows();

    let per_sample = |theta: &[f64]| -> Vec<Vec<f64>> {
        train_rows
            .iter()
            .map(|&r| ref_grad(theta, ds.row(r), ds.labels()[r], c))
            .collect()
    };
    let fisher_scores = |theta: &[f64], damp: f64| -> Vec<f64> {
        let grads = per_sample(theta);
        let np = grads[0].len();
        let mut f = vec![vec![0.0; np]; np];
        for gi in &grads {
            for a in 0..np {
                for b in 0..np {
                    f[a][b] += gi[a] * gi[b];
                }
            }
        }
        for (i, row) in f.iter_mut().enumerate() {
            row[i] += damp;
        }
        let w = gauss_solve(&f, &ref_grad(theta, xt, yt, c));
        grads.iter().map(|gi| dot(&w, gi)).collect()
    };

    let mut out = Vec::new();

    let theta = model.theta.as_slice().unwrap();
    let h = ref_hessian(theta, ds, train_rows, wd);
    let w = gauss_solve(&h, &ref_grad(theta, xt, yt, c));
    let expected: Vec<f64> = per_sample(theta).iter().map(|gi| dot(&w, gi)).collect();
    let got = influence(&model, ds, &single, &g, &HessianStrategy::Exact { damp: 0.0 }, wd, 0).unwrap();
    out.push(("influence-exact", max_rel_dev(&got.scores, &expected)));

    let damp = 1e-3;
    let expected = fisher_scores(theta, damp);
    let hs = HessianStrategy::EmpFisher {
        projection: Projection::None,
        damp,
    };
    let got = influence(&model, ds, &single, &g, &hs, wd, 0).unwrap();
    out.push(("influence-empfisher", max_rel_dev(&got.scores, &expected)));

    let mut expected = vec![0.0; ds.n_train()];
    for s in &ckpts.states {
        let th = s.theta.as_slice().unwrap();
        let gt = ref_grad(th, xt, yt, c);
        for (e, gi) in expected.iter_mut().zip(per_sample(th)) {
            *e += dot(&gt, &gi);
        }
    }
    let got = tracin(&ckpts, ds, &single, &g).unwrap();
    out.push(("tracin", max_rel_dev(&got.scores, &expected)));

    let params = TrakParams {
        members: 1,
        subsample_frac: 1.0,
        projection: Projection::None,
        damp,
    };
    let seed = 5;
    let got = trak(&arch, &cfg, ds, &single, &g, &params, seed).unwrap();
    let (member, _) = train(&arch, ds, &cfg.with_seed(derive_seed(seed, &[0])), 0).unwrap();
    let expected = fisher_scores(member.theta.as_slice().unwrap(), damp);
    out.push(("trak", max_rel_dev(&got.scores, &expected)));
    out
}

pub const PIPELINE_STAGES: [&[&str]; 7] = [
    &["train"],
    &["group"],
    &["attribute"],
    &["eval", "--metric", "retrain"],
    &["eval", "--metric", "prune"],
    &["eval", "--metric", "noisy"],
    &["bench"],
];

/// Small blobs config exercising every stage, with flipped labels so the
/// noisy metric applies.
pub fn pipeline_config(method: &str, group_size: usize) -> String {
    format!(
        r#"{{
  "seed": 11,
  "dataset": {{"kind": "blobs", "n": 200, "dim": 3, "classes": 2, "separation": 2.0}},
  "model": {{"kind": "mlp", "hidden": [8]}},
  "train": {{"learning_rate": 0.1, "epochs": 15, "batch_size": 16, "weight_decay": 0.001,
            "optimizer": {{"kind": "momentum", "beta": 0.9}}, "snapshot_every": 5}},
  "grouping": {{"method": "{method}", "group_size": {group_size}}},
  "attribution": {{"method": "tracin"}},
  "eval": {{"fractions": [0.05, 0.2], "prune_fractions": [0.5], "n_seeds": 3, "flip_fraction": 0.2}},
  "bench": {{"group_sizes": [1, 4, 16], "reps": 1}}
}}"#
    )
}

/// Runs every stage in-process; returns the exit codes.
pub fn run_pipeline(config: &std::path::Path, out: &std::path::Path) -> Vec<i32> {
    PIPELINE_STAGES
        .iter()
        .map(|stage| {
            let mut args: Vec<std::ffi::OsString> = vec!["ggda".into()];
            args.extend(stage.iter().map(|s| s.into()));
            args.extend([
                "--config".into(),
                config.as_os_str().to_owned(),
                "--out".into(),
                out.as_os_str().to_owned(),
            ]);
            ggda::cli::main_with_args(args)
        })
        .collect()
}

fn strip_json_key(v: &mut serde_json::Value, key: &str) {
    match v {
        serde_json::Value::Object(map) => {
            map.remove(key);
            map.values_mut().for_each(|x| strip_json_key(x, key));
        }
        serde_json::Value::Array(xs) => xs.iter_mut().for_each(|x| strip_json_key(x, key)),
        _ => {}
    }
}

fn drop_csv_columns(text: &str, drop: &[&str]) -> String {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let keep: Vec<usize> = (0..header.len()).filter(|&i| !drop.contains(&header[i])).collect();
    std::iter::once(header.as_slice())
        .map(|h| h.to_vec())
        .chain(lines.map(|l| l.split(',').collect()))
        .map(|cells: Vec<&str>| keep.iter().map(|&i| cells[i]).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Every artifact under `dir` keyed by relative path, with wall-clock
/// fields removed: `runtime_s` everywhere, and timing columns of the
/// benchmark table.
pub fn normalized_artifacts(dir: &std::path::Path) -> std::collections::BTreeMap<String, String> {
    let mut out = std::collections::BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
            let text = std::fs::read_to_string(&path).unwrap();
            let norm = if rel.ends_with("bench.csv") {
                drop_csv_columns(&text, &["median_s", "speedup"])
            } else if rel.ends_with(".csv") && text.starts_with("metric,") {
                drop_csv_columns(&text, &["runtime_s"])
            } else if rel.starts_with("eval_") && rel.ends_with(".json") {
                let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
                strip_json_key(&mut v, "runtime_s");
                v.to_string()
            } else {
                text
            };
            out.insert(rel, norm);
        }
    }
    out
}
