//! Inverse-Hessian strategies: `v ↦ Ĥ⁻¹ v` for the training objective.

use ndarray::{ArrayView1, Axis};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::datahub::Dataset;
use crate::error::{Error, Result};
use crate::grouping::Partition;
use crate::models::{ModelState, PassCounter};
use crate::numkit::{self, cg_solve, lissa_inverse_hvp, Cholesky, LissaParams, Mat, Projector, Rng, Vector};

pub const DEFAULT_FISHER_DAMP: f64 = 1e-3;
pub const DEFAULT_CG_TOL: f64 = 1e-8;

/// Projected dimension above which the Fisher solve switches to the
/// Woodbury form when there are fewer gradient rows than dimensions.
const DENSE_FISHER_LIMIT: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Projection {
    #[default]
    None,
    Gaussian {
        dim: usize,
    },
    /// Runs the projected code path with `P = I`.
    Identity,
}

fn default_fisher_damp() -> f64 {
    DEFAULT_FISHER_DAMP
}

fn default_cg_tol() -> f64 {
    DEFAULT_CG_TOL
}

fn lissa_damp() -> f64 {
    LissaParams::default().damp
}

fn lissa_scale() -> f64 {
    LissaParams::default().scale
}

fn lissa_depth() -> usize {
    LissaParams::default().depth
}

fn lissa_repeat() -> usize {
    LissaParams::default().repeat
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HessianStrategy {
    Exact {
        #[serde(default)]
        damp: f64,
    },
    Identity,
    Cg {
        #[serde(default = "default_cg_tol")]
        tol: f64,
        /// Defaults to the parameter count.
        #[serde(default)]
        max_iter: Option<usize>,
        #[serde(default)]
        damp: f64,
    },
    Lissa {
        #[serde(default = "lissa_damp")]
        damp: f64,
        #[serde(default = "lissa_scale")]
        scale: f64,
        #[serde(default = "lissa_depth")]
        depth: usize,
        #[serde(default = "lissa_repeat")]
        repeat: usize,
        /// Rows sampled per Hessian-vector product; all rows when unset.
        #[serde(default)]
        batch_size: Option<usize>,
    },
    EmpFisher {
        #[serde(default)]
        projection: Projection,
        #[serde(default = "default_fisher_damp")]
        damp: f64,
    },
    BatchedEmpFisher {
        #[serde(default)]
        projection: Projection,
        #[serde(default = "default_fisher_damp")]
        damp: f64,
    },
}

impl HessianStrategy {
    pub fn lissa_default() -> Self {
        let p = LissaParams::default();
        HessianStrategy::Lissa {
            damp: p.damp,
            scale: p.scale,
            depth: p.depth,
            repeat: p.repeat,
            batch_size: None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            HessianStrategy::Exact { .. } => "exact",
            HessianStrategy::Identity => "identity",
            HessianStrategy::Cg { .. } => "cg",
            HessianStrategy::Lissa { .. } => "lissa",
            HessianStrategy::EmpFisher { .. } => "emp_fisher",
            HessianStrategy::BatchedEmpFisher { .. } => "batched_emp_fisher",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::invalid(format!("{}: {what}", self.name())));
        match *self {
            HessianStrategy::Exact { damp } | HessianStrategy::Cg { damp, .. } if !(damp >= 0.0) => {
                bad("damp must be ≥ 0")
            }
            HessianStrategy::Cg { tol, .. } if !(tol > 0.0) => bad("tol must be > 0"),
            HessianStrategy::Cg { max_iter: Some(0), .. } => bad("max_iter must be ≥ 1"),
            HessianStrategy::Lissa {
                damp,
                scale,
                repeat,
                batch_size,
                ..
            } => {
                if !(damp >= 0.0) || !(scale > 0.0) || repeat == 0 || batch_size == Some(0) {
                    bad("needs damp ≥ 0, scale > 0, repeat ≥ 1, batch_size ≥ 1")
                } else {
                    Ok(())
                }
            }
            HessianStrategy::EmpFisher { projection, damp }
            | HessianStrategy::BatchedEmpFisher { projection, damp } => {
                if !(damp > 0.0) {
                    bad("damp must be > 0")
                } else if projection == (Projection::Gaussian { dim: 0 }) {
                    bad("projection dim must be ≥ 1")
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    pub fn projection(&self) -> Projection {
        match *self {
            HessianStrategy::EmpFisher { projection, .. } | HessianStrategy::BatchedEmpFisher { projection, .. } => {
                projection
            }
            _ => Projection::None,
        }
    }
}

/// The model and training rows whose objective defines `H`.
#[derive(Debug, Clone, Copy)]
pub struct ModelContext<'a> {
    pub model: &'a ModelState,
    pub ds: &'a Dataset,
    /// Absolute row indices of the training set.
    pub rows: &'a [usize],
    pub weight_decay: f64,
}

impl<'a> ModelContext<'a> {
    pub fn new(model: &'a ModelState, ds: &'a Dataset, weight_decay: f64) -> Self {
        Self {
            model,
            ds,
            rows: ds.train_rows(),
            weight_decay,
        }
    }

    pub fn hvp(&self, v: ArrayView1<f64>) -> Vector {
        self.model.hvp(self.ds, self.rows, self.weight_decay, v)
    }

    /// Group members (train positions) as absolute rows of this context.
    pub fn group_rows(&self, part: &Partition) -> Vec<Vec<usize>> {
        part.groups
            .iter()
            .map(|g| g.iter().map(|&i| self.rows[i]).collect())
            .collect()
    }
}

/// Damped empirical Fisher `BᵀB + damp·I` over gradient rows `B` (g×d).
#[derive(Debug, Clone)]
pub struct FisherAccumulator {
    basis: Mat,
    damp: f64,
    solver: FisherSolver,
}

#[derive(Debug, Clone)]
enum FisherSolver {
    Dense(Cholesky),
    /// Factor of `BBᵀ + damp·I_g`.
    Woodbury(Cholesky),
}

impl FisherAccumulator {
    pub fn from_gradients(basis: Mat, damp: f64) -> Result<Self> {
        if !(damp > 0.0) {
            return Err(Error::invalid("Fisher damping must be > 0"));
        }
        if basis.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence("non-finite gradient in Fisher basis".into()));
        }
        let (g, d) = basis.dim();
        let solver = if d <= DENSE_FISHER_LIMIT || d <= g {
            let mut f = basis.t().dot(&basis);
            f.diag_mut().mapv_inplace(|v| v + damp);
            FisherSolver::Dense(Cholesky::factor(f.view())?)
        } else {
            let mut k = basis.dot(&basis.t());
            k.diag_mut().mapv_inplace(|v| v + damp);
            FisherSolver::Woodbury(Cholesky::factor(k.view())?)
        };
        Ok(Self { basis, damp, solver })
    }

    pub fn basis(&self) -> &Mat {
        &self.basis
    }

    pub fn damp(&self) -> f64 {
        self.damp
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    /// Undamped `BᵀB`.
    pub fn matrix(&self) -> Mat {
        self.basis.t().dot(&self.basis)
    }

    /// `(BᵀB + damp·I)⁻¹ v`.
    pub fn solve(&self, v: ArrayView1<f64>) -> Result<Vector> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: v.len(),
            });
        }
        match &self.solver {
            FisherSolver::Dense(ch) => ch.solve(v),
            FisherSolver::Woodbury(ch) => {
                // (damp·I + BᵀB)⁻¹ = (I − Bᵀ(damp·I + BBᵀ)⁻¹B) / damp
                let t = ch.solve(self.basis.dot(&v).view())?;
                let mut out = v.to_owned() - self.basis.t().dot(&t);
                out /= self.damp;
                Ok(out)
            }
        }
    }
}

pub fn fisher_frobenius_gap(a: &FisherAccumulator, b: &FisherAccumulator) -> f64 {
    (a.matrix() - b.matrix()).mapv(|v| v * v).sum().sqrt()
}

fn make_projector(projection: Projection, p: usize, rng: &mut Rng) -> Result<Option<Projector>> {
    Ok(match projection {
        Projection::None => None,
        Projection::Identity => Some(Projector::Identity(p)),
        Projection::Gaussian { dim } => Some(Projector::gaussian(p, dim, rng)?),
    })
}

/// Builds the (optionally projected) empirical Fisher of `ctx`.
///
/// With `groups = None` the basis holds one gradient per training row;
/// otherwise one summed gradient per group.
pub fn build_fisher(
    ctx: &ModelContext,
    groups: Option<&Partition>,
    projection: Projection,
    damp: f64,
    rng: &mut Rng,
) -> Result<(FisherAccumulator, Option<Projector>)> {
    let proj = make_projector(projection, ctx.model.num_params(), rng)?;
    let rows = match groups {
        Some(part) => ctx.group_rows(part),
        None => ctx.rows.iter().map(|&r| vec![r]).collect(),
    };
    let grads = ctx.model.grad_groups(ctx.ds, &rows, None);
    let basis = match &proj {
        Some(p) => p.project_rows(grads.view())?,
        None => grads,
    };
    Ok((FisherAccumulator::from_gradients(basis, damp)?, proj))
}

enum Inner {
    Identity,
    Dense(Cholesky),
    Cg {
        tol: f64,
        max_iter: usize,
        damp: f64,
    },
    Lissa {
        params: LissaParams,
        batch_size: Option<usize>,
    },
    Fisher(FisherAccumulator),
}

/// A strategy bound to a model context, ready to apply `Ĥ⁻¹`.
///
/// Fisher strategies with a projection work in the projected space: run
/// every vector through [`InverseHessian::project`] before
/// [`InverseHessian::apply`].
pub struct InverseHessian<'a> {
    ctx: ModelContext<'a>,
    inner: Inner,
    projector: Option<Projector>,
    rng: Rng,
}

impl<'a> InverseHessian<'a> {
    /// Prepares `strategy`. Batched Fisher strategies use the groups of
    /// `partition` (singletons when `None`).
    pub fn prepare(
        strategy: &HessianStrategy,
        ctx: ModelContext<'a>,
        partition: Option<&Partition>,
        seed: u64,
    ) -> Result<Self> {
        Self::prepare_inner(strategy, ctx, partition, None, seed)
    }

    /// Like [`InverseHessian::prepare`], reusing already computed summed
    /// group gradients (k×p) as the batched Fisher basis.
    pub fn prepare_with_group_gradients(
        strategy: &HessianStrategy,
        ctx: ModelContext<'a>,
        group_grads: &Mat,
        seed: u64,
    ) -> Result<Self> {
        Self::prepare_inner(strategy, ctx, None, Some(group_grads), seed)
    }

    fn prepare_inner(
        strategy: &HessianStrategy,
        ctx: ModelContext<'a>,
        partition: Option<&Partition>,
        group_grads: Option<&Mat>,
        seed: u64,
    ) -> Result<Self> {
        strategy.validate()?;
        let p = ctx.model.num_params();
        let mut rng = numkit::rng(seed);
        let mut projector = None;
        let inner = match *strategy {
            HessianStrategy::Identity => Inner::Identity,
            HessianStrategy::Exact { damp } => {
                let mut h = ctx.model.exact_hessian(ctx.ds, ctx.rows, ctx.weight_decay)?;
                h.diag_mut().mapv_inplace(|v| v + damp);
                Inner::Dense(Cholesky::factor(h.view())?)
            }
            HessianStrategy::Cg { tol, max_iter, damp } => Inner::Cg {
                tol,
                max_iter: max_iter.unwrap_or(p),
                damp,
            },
            HessianStrategy::Lissa {
                damp,
                scale,
                depth,
                repeat,
                batch_size,
            } => Inner::Lissa {
                params: LissaParams {
                    damp,
                    scale,
                    depth,
                    repeat,
                },
                batch_size,
            },
            HessianStrategy::EmpFisher { projection, damp } => {
                let (acc, proj) = build_fisher(&ctx, None, projection, damp, &mut rng)?;
                projector = proj;
                Inner::Fisher(acc)
            }
            HessianStrategy::BatchedEmpFisher { projection, damp } => match group_grads {
                Some(g) => {
                    if g.ncols() != p {
                        return Err(Error::DimensionMismatch {
                            expected: p,
                            got: g.ncols(),
                        });
                    }
                    projector = make_projector(projection, p, &mut rng)?;
                    let basis = match &projector {
                        Some(pr) => pr.project_rows(g.view())?,
                        None => g.clone(),
                    };
                    Inner::Fisher(FisherAccumulator::from_gradients(basis, damp)?)
                }
                None => {
                    let singletons;
                    let part = match partition {
                        Some(part) => part,
                        None => {
                            singletons = Partition::singletons(ctx.rows.len());
                            &singletons
                        }
                    };
                    let (acc, proj) = build_fisher(&ctx, Some(part), projection, damp, &mut rng)?;
                    projector = proj;
                    Inner::Fisher(acc)
                }
            },
        };
        Ok(Self {
            ctx,
            inner,
            projector,
            rng,
        })
    }

    pub fn projector(&self) -> Option<&Projector> {
        self.projector.as_ref()
    }

    /// Dimension of the space `apply` works in.
    pub fn dim(&self) -> usize {
        self.projector
            .as_ref()
            .map_or(self.ctx.model.num_params(), Projector::output_dim)
    }

    /// Maps a parameter-space vector into the working space.
    pub fn project(&self, v: ArrayView1<f64>) -> Result<Vector> {
        match &self.projector {
            Some(p) => p.project(v),
            None => Ok(v.to_owned()),
        }
    }

    pub fn project_rows(&self, m: Mat) -> Result<Mat> {
        match &self.projector {
            Some(p) => p.project_rows(m.view()),
            None => Ok(m),
        }
    }

    /// The Fisher basis, when this strategy has one.
    pub fn fisher(&self) -> Option<&FisherAccumulator> {
        match &self.inner {
            Inner::Fisher(acc) => Some(acc),
            _ => None,
        }
    }

    pub fn apply(&mut self, v: ArrayView1<f64>) -> Result<Vector> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: v.len(),
            });
        }
        let ctx = self.ctx;
        match &self.inner {
            Inner::Identity => Ok(v.to_owned()),
            Inner::Dense(ch) => ch.solve(v),
            Inner::Fisher(acc) => acc.solve(v),
            &Inner::Cg { tol, max_iter, damp } => {
                let out = cg_solve(
                    |u| {
                        let mut hu = ctx.hvp(u);
                        hu.scaled_add(damp, &u);
                        hu
                    },
                    v,
                    max_iter,
                    tol,
                )?;
                Ok(out.x)
            }
            &Inner::Lissa { params, batch_size } => {
                let n = ctx.rows.len();
                lissa_inverse_hvp(
                    |u, rng| match batch_size {
                        Some(b) if b < n => {
                            let pick: Vec<usize> = index::sample(rng, n, b).into_iter().map(|i| ctx.rows[i]).collect();
                            ctx.model.hvp(ctx.ds, &pick, ctx.weight_decay, u)
                        }
                        _ => ctx.hvp(u),
                    },
                    v,
                    params,
                    &mut self.rng,
                )
            }
        }
    }
}

/// One-shot `Ĥ⁻¹ v` for a parameter-space `v`; the result lives in the
/// strategy's working space.
pub fn apply_inverse(strategy: &HessianStrategy, ctx: ModelContext, v: ArrayView1<f64>, seed: u64) -> Result<Vector> {
    let mut ih = InverseHessian::prepare(strategy, ctx, None, seed)?;
    let pv = ih.project(v)?;
    ih.apply(pv.view())
}

/// Result of comparing loss-gradient and margin-gradient outer products
/// for a binary model at temperature `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrakFisherReport {
    pub temperature: f64,
    pub points: usize,
    /// Max over points of `max|∇ℓ∇ℓᵀ − C·∇f∇fᵀ| / max|∇ℓ∇ℓᵀ|`.
    pub max_deviation: f64,
    /// `C(T)·4T²` for a zero margin; tends to 1 as `T` grows.
    pub c_times_4t2_at_zero: f64,
    /// `C(T)·4T²` for each checked point.
    pub c_times_4t2: Vec<f64>,
}

/// `C(T) = exp(−2yf/T) / ((1 + exp(−yf/T))² T²)` for `y ∈ {−1, +1}`.
pub fn trak_c(margin: f64, y_sign: f64, temperature: f64) -> f64 {
    let u = y_sign * margin / temperature;
    (-2.0 * u).exp() / ((1.0 + (-u).exp()).powi(2) * temperature * temperature)
}

/// Checks `∇ℓ_T ∇ℓ_Tᵀ = C(T) ∇f ∇fᵀ` on the given rows, where `f = z₁ − z₀`
/// and `ℓ_T = log(1 + exp(−y f / T))` with `y = +1` for class 1.
pub fn trak_fisher_equivalence_check(
    m: &ModelState,
    ds: &Dataset,
    rows: &[usize],
    temperature: f64,
) -> Result<TrakFisherReport> {
    if m.arch.num_classes() != 2 {
        return Err(Error::invalid("the margin identity needs a binary model"));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be > 0"));
    }
    let mut max_deviation: f64 = 0.0;
    let mut ratios = Vec::with_capacity(rows.len());
    for &r in rows {
        let x = ds.row(r);
        let y = ds.labels()[r];
        let z = m.logits(x);
        let f = z[1] - z[0];
        let y_sign = if y == 1 { 1.0 } else { -1.0 };
        let gl = m.grad_group_tempered(ds, &[r], temperature);
        let gf = m.margin_grad(x, 1, 0);
        let c = trak_c(f, y_sign, temperature);
        let lhs = outer(&gl);
        let rhs = outer(&gf) * c;
        let scale = lhs.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let diff = (&lhs - &rhs).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let dev = if scale > 0.0 { diff / scale } else { diff };
        max_deviation = max_deviation.max(dev);
        ratios.push(c * 4.0 * temperature * temperature);
    }
    Ok(TrakFisherReport {
        temperature,
        points: rows.len(),
        max_deviation,
        c_times_4t2_at_zero: trak_c(0.0, 1.0, temperature) * 4.0 * temperature * temperature,
        c_times_4t2: ratios,
    })
}

fn outer(v: &Vector) -> Mat {
    let col = v.view().insert_axis(Axis(1));
    let row = v.view().insert_axis(Axis(0));
    col.dot(&row)
}

/// Group gradients for `part`, counted on `counter`.
pub fn counted_group_gradients(ctx: &ModelContext, part: &Partition, counter: &PassCounter) -> Mat {
    ctx.model.grad_groups(ctx.ds, &ctx.group_rows(part), Some(counter))
}
