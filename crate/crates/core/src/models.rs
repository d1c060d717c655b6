//! Small differentiable classifiers and their gradient machinery.
//!
//! Parameters are stored as one flat vector `θ`, layer-major; within a layer
//! the weight matrix (out×in, row-major) comes before the bias (out).
//! Hidden layers use ReLU; the output layer produces logits for a softmax
//! cross-entropy loss.
//!
//! All model functions address dataset rows by absolute row index.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datahub::{write_atomic, Dataset};
use crate::error::{Error, Result};
use crate::numkit::{self, Mat, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    LogReg,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub kind: ModelKind,
    /// `[input, hidden..., classes]`.
    pub layer_sizes: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
struct LayerSpec {
    inputs: usize,
    outputs: usize,
    w_off: usize,
    b_off: usize,
}

impl Architecture {
    pub fn logreg(inputs: usize, classes: usize) -> Self {
        Self {
            kind: ModelKind::LogReg,
            layer_sizes: vec![inputs, classes],
        }
    }

    pub fn mlp(inputs: usize, hidden: &[usize], classes: usize) -> Self {
        let mut layer_sizes = vec![inputs];
        layer_sizes.extend_from_slice(hidden);
        layer_sizes.push(classes);
        Self {
            kind: ModelKind::Mlp,
            layer_sizes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 || self.layer_sizes.contains(&0) {
            return Err(Error::invalid(format!(
                "layer sizes {:?} need ≥ 2 nonzero entries",
                self.layer_sizes
            )));
        }
        match self.kind {
            ModelKind::LogReg if self.layer_sizes.len() != 2 => {
                Err(Error::invalid("logistic regression has no hidden layers"))
            }
            ModelKind::Mlp if self.layer_sizes.len() < 3 => {
                Err(Error::invalid("an MLP needs at least one hidden layer"))
            }
            _ => Ok(()),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated architecture")
    }

    /// Size of the representation fed into the output layer.
    pub fn penultimate_dim(&self) -> usize {
        self.layer_sizes[self.layer_sizes.len() - 2]
    }

    pub fn num_params(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn layers(&self) -> Vec<LayerSpec> {
        let mut off = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let spec = LayerSpec {
                    inputs: w[0],
                    outputs: w[1],
                    w_off: off,
                    b_off: off + w[0] * w[1],
                };
                off += w[0] * w[1] + w[1];
                spec
            })
            .collect()
    }
}

/// Counts batched forward/backward passes over training data.
#[derive(Debug, Default)]
pub struct PassCounter(AtomicUsize);

impl PassCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self) -> usize {
        self.0.load(Ordering::Relaxed)
    }

    fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }
}

struct ForwardCache {
    /// `acts[0]` is the input batch; `acts[l]` the output of layer `l`
    /// (post-ReLU for hidden layers, logits for the last).
    acts: Vec<Mat>,
}

impl ForwardCache {
    fn logits(&self) -> &Mat {
        self.acts.last().expect("non-empty cache")
    }
}

fn softmax_rows(logits: &Mat, temperature: f64) -> Mat {
    let mut p = logits / temperature;
    for mut row in p.axis_iter_mut(Axis(0)) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|z| (z - m).exp());
        let sum = row.sum();
        row /= sum;
    }
    p
}

/// `softmax(z/T) − onehot(y)`, with the true-class entry formed as
/// `−Σ_{c≠y} p_c` so it keeps full relative precision when `p_y ≈ 1`.
fn residual_rows(logits: &Mat, y: &[usize], temperature: f64) -> Mat {
    let mut d = softmax_rows(logits, temperature);
    for (mut row, &c) in d.axis_iter_mut(Axis(0)).zip(y) {
        let others: f64 = row.iter().enumerate().filter(|&(j, _)| j != c).map(|(_, p)| p).sum();
        row[c] = -others;
    }
    d
}

/// Cross-entropy `−log softmax(z)[y]` via log-sum-exp.
pub fn cross_entropy(logits: ArrayView1<f64>, label: usize) -> f64 {
    let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    let l = lse - logits[label];
    if l < 0.0 {
        0.0
    } else {
        l
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub arch: Architecture,
    pub theta: Vector,
    pub tag: Option<String>,
}

impl ModelState {
    pub fn new(arch: Architecture, theta: Vector) -> Result<Self> {
        arch.validate()?;
        if theta.len() != arch.num_params() {
            return Err(Error::DimensionMismatch {
                expected: arch.num_params(),
                got: theta.len(),
            });
        }
        Ok(Self { arch, theta, tag: None })
    }

    /// Uniform `±1/√fan_in` weights, zero biases.
    pub fn init(arch: Architecture, rng: &mut numkit::Rng) -> Result<Self> {
        arch.validate()?;
        let mut theta = Vector::zeros(arch.num_params());
        for l in arch.layers() {
            let bound = 1.0 / (l.inputs as f64).sqrt();
            for w in theta.slice_mut(s![l.w_off..l.b_off]).iter_mut() {
                *w = rng.random_range(-bound..bound);
            }
        }
        Self::new(arch, theta)
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    fn weights_of<'a>(theta: &'a [f64], l: &LayerSpec) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((l.outputs, l.inputs), &theta[l.w_off..l.b_off]).expect("layer slice matches its shape")
    }

    fn bias_of<'a>(theta: &'a [f64], l: &LayerSpec) -> ArrayView1<'a, f64> {
        ArrayView1::from(&theta[l.b_off..l.b_off + l.outputs])
    }

    fn forward(&self, x: ArrayView2<f64>) -> ForwardCache {
        let theta = self.theta.as_slice().expect("contiguous parameters");
        let layers = self.arch.layers();
        let mut acts = Vec::with_capacity(layers.len() + 1);
        acts.push(x.to_owned());
        for (i, l) in layers.iter().enumerate() {
            let w = Self::weights_of(theta, l);
            let b = Self::bias_of(theta, l);
            let mut z = acts[i].dot(&w.t());
            z += &b;
            if i + 1 < layers.len() {
                z.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(z);
        }
        ForwardCache { acts }
    }

    /// Gradient of `Σ_i ⟨dlogits_i, logits_i⟩` with respect to θ.
    fn backward(&self, cache: &ForwardCache, dlogits: Mat) -> Vector {
        let theta = self.theta.as_slice().expect("contiguous parameters");
        let layers = self.arch.layers();
        let mut grad = Vector::zeros(self.num_params());
        let gs = grad.as_slice_mut().expect("contiguous gradient");
        let mut delta = dlogits;
        for (i, l) in layers.iter().enumerate().rev() {
            let a_prev = &cache.acts[i];
            let dw = delta.t().dot(a_prev);
            ArrayViewMut2::from_shape((l.outputs, l.inputs), &mut gs[l.w_off..l.b_off])
                .expect("layer slice matches its shape")
                .assign(&dw);
            let db = delta.sum_axis(Axis(0));
            gs[l.b_off..l.b_off + l.outputs].copy_from_slice(db.as_slice().expect("contiguous"));
            if i > 0 {
                let w = Self::weights_of(theta, l);
                let mut d_prev = delta.dot(&w);
                d_prev.zip_mut_with(a_prev, |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = d_prev;
            }
        }
        grad
    }

    fn gather(ds: &Dataset, rows: &[usize]) -> (Mat, Vec<usize>) {
        let x = ds.features().select(Axis(0), rows);
        let y = rows.iter().map(|&r| ds.labels()[r]).collect();
        (x, y)
    }

    fn loss_grad_batch(&self, x: ArrayView2<f64>, y: &[usize], temperature: f64) -> (f64, Vector) {
        let cache = self.forward(x);
        let logits = cache.logits();
        let loss: f64 = logits
            .axis_iter(Axis(0))
            .zip(y)
            .map(|(z, &c)| cross_entropy((&z / temperature).view(), c))
            .sum();
        let mut d = residual_rows(logits, y, temperature);
        if temperature != 1.0 {
            d /= temperature;
        }
        (loss, self.backward(&cache, d))
    }

    pub fn logits(&self, x: ArrayView1<f64>) -> Vector {
        let cache = self.forward(x.insert_axis(Axis(0)));
        cache.logits().row(0).to_owned()
    }

    pub fn logits_rows(&self, ds: &Dataset, rows: &[usize]) -> Mat {
        let (x, _) = Self::gather(ds, rows);
        self.forward(x.view()).acts.pop().expect("non-empty cache")
    }

    /// Cross-entropy loss of one example.
    pub fn loss(&self, x: ArrayView1<f64>, y: usize) -> f64 {
        cross_entropy(self.logits(x).view(), y)
    }

    pub fn mean_loss(&self, ds: &Dataset, rows: &[usize]) -> f64 {
        if rows.is_empty() {
            return 0.0;
        }
        let logits = self.logits_rows(ds, rows);
        logits
            .axis_iter(Axis(0))
            .zip(rows)
            .map(|(z, &r)| cross_entropy(z, ds.labels()[r]))
            .sum::<f64>()
            / rows.len() as f64
    }

    pub fn predict_rows(&self, ds: &Dataset, rows: &[usize]) -> Vec<usize> {
        self.logits_rows(ds, rows)
            .axis_iter(Axis(0))
            .map(|z| {
                z.iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |best, (c, &v)| if v > best.1 { (c, v) } else { best },
                    )
                    .0
            })
            .collect()
    }

    pub fn accuracy(&self, ds: &Dataset, rows: &[usize]) -> f64 {
        if rows.is_empty() {
            return 0.0;
        }
        let preds = self.predict_rows(ds, rows);
        let hits = preds.iter().zip(rows).filter(|(p, &r)| **p == ds.labels()[r]).count();
        hits as f64 / rows.len() as f64
    }

    /// `∇θ ℓ(x, y)`.
    pub fn grad_single(&self, x: ArrayView1<f64>, y: usize) -> Vector {
        self.loss_grad_batch(x.insert_axis(Axis(0)), &[y], 1.0).1
    }

    /// `∇θ Σ_{i∈rows} ℓ(x_i, y_i)` in one batched forward/backward pass.
    pub fn grad_group(&self, ds: &Dataset, rows: &[usize]) -> Vector {
        if rows.is_empty() {
            return Vector::zeros(self.num_params());
        }
        let (x, y) = Self::gather(ds, rows);
        self.loss_grad_batch(x.view(), &y, 1.0).1
    }

    pub fn grad_group_counted(&self, ds: &Dataset, rows: &[usize], counter: &PassCounter) -> Vector {
        counter.bump();
        self.grad_group(ds, rows)
    }

    /// One summed gradient per group, stacked as rows (k×p).
    pub fn grad_groups(&self, ds: &Dataset, groups: &[Vec<usize>], counter: Option<&PassCounter>) -> Mat {
        let mut out = Mat::zeros((groups.len(), self.num_params()));
        for (mut dst, rows) in out.axis_iter_mut(Axis(0)).zip(groups) {
            if let (Some(c), false) = (counter, rows.is_empty()) {
                c.bump();
            }
            dst.assign(&self.grad_group(ds, rows));
        }
        out
    }

    /// Summed loss gradient with logits divided by `temperature`.
    pub fn grad_group_tempered(&self, ds: &Dataset, rows: &[usize], temperature: f64) -> Vector {
        let (x, y) = Self::gather(ds, rows);
        self.loss_grad_batch(x.view(), &y, temperature).1
    }

    /// `∇θ (z_b − z_a)`: gradient of a logit margin for one input.
    pub fn margin_grad(&self, x: ArrayView1<f64>, positive: usize, negative: usize) -> Vector {
        let cache = self.forward(x.insert_axis(Axis(0)));
        let mut d = Mat::zeros((1, self.arch.num_classes()));
        d[[0, positive]] += 1.0;
        d[[0, negative]] -= 1.0;
        self.backward(&cache, d)
    }

    /// `Σ_{i∈rows} ∇²θ ℓ(x_i, y_i) · v`, exact, by forward-over-reverse
    /// (R-operator) propagation.
    pub fn hvp_sum(&self, ds: &Dataset, rows: &[usize], v: ArrayView1<f64>) -> Vector {
        let p = self.num_params();
        assert_eq!(v.len(), p, "direction length must match parameter count");
        if rows.is_empty() {
            return Vector::zeros(p);
        }
        let (x, y) = Self::gather(ds, rows);
        let theta = self.theta.as_slice().expect("contiguous parameters");
        let vs = v.to_owned();
        let vsl = vs.as_slice().expect("contiguous direction");
        let layers = self.arch.layers();
        let cache = self.forward(x.view());
        let n_layers = layers.len();

        // forward R-pass: r_acts[l] = R{acts[l]}
        let mut r_acts: Vec<Mat> = Vec::with_capacity(n_layers + 1);
        r_acts.push(Mat::zeros(x.raw_dim()));
        for (i, l) in layers.iter().enumerate() {
            let w = Self::weights_of(theta, l);
            let vw = Self::weights_of(vsl, l);
            let vb = Self::bias_of(vsl, l);
            let mut rz = r_acts[i].dot(&w.t()) + cache.acts[i].dot(&vw.t());
            rz += &vb;
            if i + 1 < n_layers {
                rz.zip_mut_with(&cache.acts[i + 1], |r, &a| {
                    if a <= 0.0 {
                        *r = 0.0;
                    }
                });
            }
            r_acts.push(rz);
        }

        let probs = softmax_rows(cache.logits(), 1.0);
        let mut delta = residual_rows(cache.logits(), &y, 1.0);
        let rz_out = &r_acts[n_layers];
        let mut r_delta = &probs * rz_out;
        let pr = r_delta.sum_axis(Axis(1));
        for (mut row, (prow, s)) in r_delta
            .axis_iter_mut(Axis(0))
            .zip(probs.axis_iter(Axis(0)).zip(pr.iter()))
        {
            row.scaled_add(-s, &prow);
        }

        let mut out = Vector::zeros(p);
        let os = out.as_slice_mut().expect("contiguous output");
        for (i, l) in layers.iter().enumerate().rev() {
            let a_prev = &cache.acts[i];
            let ra_prev = &r_acts[i];
            let rdw = r_delta.t().dot(a_prev) + delta.t().dot(ra_prev);
            ArrayViewMut2::from_shape((l.outputs, l.inputs), &mut os[l.w_off..l.b_off])
                .expect("layer slice matches its shape")
                .assign(&rdw);
            let rdb = r_delta.sum_axis(Axis(0));
            os[l.b_off..l.b_off + l.outputs].copy_from_slice(rdb.as_slice().expect("contiguous"));
            if i > 0 {
                let w = Self::weights_of(theta, l);
                let vw = Self::weights_of(vsl, l);
                let mut d_prev = delta.dot(&w);
                let mut rd_prev = r_delta.dot(&w) + delta.dot(&vw);
                let mask = |d: &mut f64, &a: &f64| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                };
                d_prev.zip_mut_with(a_prev, mask);
                rd_prev.zip_mut_with(a_prev, mask);
                delta = d_prev;
                r_delta = rd_prev;
            }
        }
        out
    }

    /// Hessian-vector product of the training objective
    /// `(1/|rows|) Σ ℓ + (weight_decay/2)‖θ‖²`.
    pub fn hvp(&self, ds: &Dataset, rows: &[usize], weight_decay: f64, v: ArrayView1<f64>) -> Vector {
        let mut hv = self.hvp_sum(ds, rows, v);
        if !rows.is_empty() {
            hv /= rows.len() as f64;
        }
        hv.scaled_add(weight_decay, &v);
        hv
    }

    /// Dense Hessian of the training objective; refuses `p > MAX_DENSE_PARAMS`.
    pub fn exact_hessian(&self, ds: &Dataset, rows: &[usize], weight_decay: f64) -> Result<Mat> {
        let p = self.num_params();
        if p > MAX_DENSE_PARAMS {
            return Err(Error::TooLarge {
                p,
                limit: MAX_DENSE_PARAMS,
            });
        }
        let mut h = Mat::zeros((p, p));
        let mut e = Vector::zeros(p);
        for j in 0..p {
            e[j] = 1.0;
            let mut col = self.hvp_sum(ds, rows, e.view());
            if !rows.is_empty() {
                col /= rows.len() as f64;
            }
            h.column_mut(j).assign(&col);
            e[j] = 0.0;
        }
        // average out roundoff asymmetry; the diagonal is untouched
        let sym = (&h + &h.t()) * 0.5;
        let mut h = sym;
        for j in 0..p {
            h[[j, j]] += weight_decay;
        }
        Ok(h)
    }

    /// Last hidden activation; for logistic regression the input itself.
    pub fn hidden_repr(&self, x: ArrayView1<f64>) -> Vector {
        let mut cache = self.forward(x.insert_axis(Axis(0)));
        let n = cache.acts.len();
        cache.acts.swap_remove(n - 2).row(0).to_owned()
    }

    pub fn hidden_repr_rows(&self, ds: &Dataset, rows: &[usize]) -> Mat {
        let (x, _) = Self::gather(ds, rows);
        let mut cache = self.forward(x.view());
        let n = cache.acts.len();
        cache.acts.swap_remove(n - 2)
    }

    /// `∂ℓ/∂a` where `a` is the input of the output layer.
    pub fn penult_grad(&self, x: ArrayView1<f64>, y: usize) -> Vector {
        self.penult_grad_batch(x.insert_axis(Axis(0)), &[y]).row(0).to_owned()
    }

    pub fn penult_grad_rows(&self, ds: &Dataset, rows: &[usize]) -> Mat {
        let (x, y) = Self::gather(ds, rows);
        self.penult_grad_batch(x.view(), &y)
    }

    fn penult_grad_batch(&self, x: ArrayView2<f64>, y: &[usize]) -> Mat {
        let cache = self.forward(x);
        let d = residual_rows(cache.logits(), y, 1.0);
        let last = *self.arch.layers().last().expect("validated architecture");
        let theta = self.theta.as_slice().expect("contiguous parameters");
        d.dot(&Self::weights_of(theta, &last))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, serde_json::to_string(self)?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: ModelState = serde_json::from_str(&text)?;
        m.arch.validate()?;
        if m.theta.len() != m.arch.num_params() {
            return Err(Error::Schema(format!(
                "checkpoint has {} parameters, architecture needs {}",
                m.theta.len(),
                m.arch.num_params()
            )));
        }
        Ok(m)
    }
}

pub const MAX_DENSE_PARAMS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Gd,
    Momentum { beta: f64 },
}

/// Minibatch gradient descent settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_optimizer")]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub seed: u64,
    /// Stop early once the full-data objective gradient norm drops to this value.
    #[serde(default)]
    pub grad_tol: Option<f64>,
}

fn default_optimizer() -> Optimizer {
    Optimizer::Gd
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 200,
            batch_size: 128,
            weight_decay: 0.0,
            optimizer: Optimizer::Gd,
            seed: 0,
            grad_tol: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be > 0"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be ≥ 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be ≥ 1"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay must be ≥ 0"));
        }
        if let Optimizer::Momentum { beta } = self.optimizer {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::invalid("momentum beta must be in [0, 1)"));
            }
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// Ordered parameter snapshots taken during training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoints {
    pub states: Vec<ModelState>,
}

impl Checkpoints {
    pub fn last(&self) -> &ModelState {
        self.states.last().expect("checkpoints are never empty")
    }
}

/// Trains on all training rows of `ds`.
pub fn train(
    arch: &Architecture,
    ds: &Dataset,
    cfg: &TrainConfig,
    snapshot_every: usize,
) -> Result<(ModelState, Checkpoints)> {
    train_on(arch, ds, ds.train_rows(), cfg, snapshot_every)
}

/// Minimizes mean cross-entropy + (weight_decay/2)‖θ‖² over `rows` by
/// minibatch gradient descent. Shuffling and initialization come from
/// `cfg.seed`. Snapshots are taken every `snapshot_every` epochs (0 = only
/// the final state); the final state is always the last snapshot.
pub fn train_on(
    arch: &Architecture,
    ds: &Dataset,
    rows: &[usize],
    cfg: &TrainConfig,
    snapshot_every: usize,
) -> Result<(ModelState, Checkpoints)> {
    cfg.validate()?;
    if rows.is_empty() {
        return Err(Error::invalid("training needs at least one row"));
    }
    if arch.input_dim() != ds.num_features() || arch.num_classes() < ds.num_classes() {
        return Err(Error::invalid(format!(
            "architecture {:?} does not fit dataset with {} features and {} classes",
            arch.layer_sizes,
            ds.num_features(),
            ds.num_classes()
        )));
    }
    let mut rng = numkit::rng(cfg.seed);
    let mut model = ModelState::init(arch.clone(), &mut rng)?;
    let mut velocity = Vector::zeros(model.num_params());
    let mut order = rows.to_vec();
    let full_batch = cfg.batch_size >= rows.len();
    let mut snapshots = Vec::new();
    let mut last_epoch = 0;

    for epoch in 1..=cfg.epochs {
        last_epoch = epoch;
        if let Some(tol) = cfg.grad_tol {
            let mut g = model.grad_group(ds, rows) / rows.len() as f64;
            g.scaled_add(cfg.weight_decay, &model.theta);
            if numkit::norm2(g.view()) <= tol {
                last_epoch = epoch - 1;
                break;
            }
        }
        if !full_batch {
            order.shuffle(&mut rng);
        }
        for batch in order.chunks(cfg.batch_size) {
            let (x, y) = ModelState::gather(ds, batch);
            let (loss, mut g) = model.loss_grad_batch(x.view(), &y, 1.0);
            if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch });
            }
            g /= batch.len() as f64;
            g.scaled_add(cfg.weight_decay, &model.theta);
            match cfg.optimizer {
                Optimizer::Gd => model.theta.scaled_add(-cfg.learning_rate, &g),
                Optimizer::Momentum { beta } => {
                    velocity *= beta;
                    velocity += &g;
                    model.theta.scaled_add(-cfg.learning_rate, &velocity);
                }
            }
        }
        if model.theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { epoch });
        }
        if snapshot_every > 0 && epoch % snapshot_every == 0 && epoch < cfg.epochs {
            let mut snap = model.clone();
            snap.tag = Some(format!("epoch-{epoch}"));
            snapshots.push(snap);
        }
    }
    model.tag = Some(format!("epoch-{last_epoch}"));
    snapshots.push(model.clone());
    Ok((model, Checkpoints { states: snapshots }))
}

/// `(1/|rows|) Σ ∇ℓ + weight_decay·θ`.
pub fn objective_grad(model: &ModelState, ds: &Dataset, rows: &[usize], weight_decay: f64) -> Vector {
    let mut g = model.grad_group(ds, rows);
    if !rows.is_empty() {
        g /= rows.len() as f64;
    }
    g.scaled_add(weight_decay, &model.theta);
    g
}

pub fn stack_rows(rows: &[Vector]) -> Mat {
    let cols = rows.first().map_or(0, |r| r.len());
    let mut m = Array2::zeros((rows.len(), cols));
    for (mut dst, src) in m.axis_iter_mut(Axis(0)).zip(rows) {
        dst.assign(src);
    }
    m
}
