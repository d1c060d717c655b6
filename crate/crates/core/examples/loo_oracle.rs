//! Exact-Hessian influence against leave-group-out retraining on a convex
//! model.

use ggda::attributors::{influence, loo_oracle, PropertyFn};
use ggda::datahub::make_blobs;
use ggda::grouping::random_partition;
use ggda::hessians::HessianStrategy;
use ggda::models::{train, Architecture, TrainConfig};
use ggda::numkit::{pearson, rng, spearman};

fn main() -> ggda::Result<()> {
    let ds = make_blobs(80, 2, 2, 2.0, &mut rng(0))?;
    let arch = Architecture::logreg(2, 2);
    let cfg = TrainConfig {
        learning_rate: 1.0,
        epochs: 20_000,
        batch_size: usize::MAX,
        weight_decay: 1e-2,
        grad_tol: Some(1e-8),
        ..Default::default()
    };
    let (model, _) = train(&arch, &ds, &cfg, 0)?;
    let part = random_partition(ds.n_train(), 4, &mut rng(1))?;
    let g = PropertyFn::MeanTestLoss;

    let inf = influence(
        &model,
        &ds,
        &part,
        &g,
        &HessianStrategy::Exact { damp: 0.0 },
        cfg.weight_decay,
        0,
    )?;
    let loo = loo_oracle(&arch, &ds, &part, &g, &cfg, 1, 0)?;
    // influence omits the 1/n factor of the parameter change
    let n = ds.n_train() as f64;
    for (j, (a, b)) in inf.scores.iter().zip(&loo.scores).enumerate().take(8) {
        println!("group {j:>2}: influence/n {:+.5}  retrained {:+.5}", a / n, b);
    }
    println!(
        "{} groups: pearson {:.3}, spearman {:.3}",
        part.k(),
        pearson(&inf.scores, &loo.scores),
        spearman(&inf.scores, &loo.scores)
    );
    Ok(())
}
