//! Every inverse-Hessian strategy on one logistic regression model, scored
//! against the exact solve.

use std::time::Instant;

use ggda::attributors::{influence, PropertyFn};
use ggda::datahub::make_blobs;
use ggda::grouping::{group, GroupingMethod};
use ggda::hessians::{HessianStrategy, Projection};
use ggda::models::{train, Architecture, TrainConfig};
use ggda::numkit::{pearson, rng, spearman};

fn main() -> ggda::Result<()> {
    let ds = make_blobs(500, 6, 3, 2.0, &mut rng(3))?;
    let cfg = TrainConfig {
        learning_rate: 0.5,
        epochs: 300,
        batch_size: usize::MAX,
        weight_decay: 1e-2,
        ..Default::default()
    };
    let (model, _) = train(&Architecture::logreg(6, 3), &ds, &cfg, 0)?;
    let part = group(&ds, Some(&model), GroupingMethod::GradKMeans, 8, 0)?;
    let g = PropertyFn::MeanTestLoss;
    let exact = influence(
        &model,
        &ds,
        &part,
        &g,
        &HessianStrategy::Exact { damp: 0.0 },
        cfg.weight_decay,
        0,
    )?;

    let strategies = [
        HessianStrategy::Identity,
        HessianStrategy::Cg {
            tol: 1e-10,
            max_iter: None,
            damp: 0.0,
        },
        HessianStrategy::Lissa {
            damp: 1e-3,
            scale: 10.0,
            depth: 300,
            repeat: 4,
            batch_size: Some(64),
        },
        HessianStrategy::EmpFisher {
            projection: Projection::None,
            damp: 1e-3,
        },
        HessianStrategy::EmpFisher {
            projection: Projection::Gaussian { dim: 12 },
            damp: 1e-3,
        },
        HessianStrategy::BatchedEmpFisher {
            projection: Projection::None,
            damp: 1e-3,
        },
    ];
    println!("{:<22} {:>8} {:>8} {:>9}", "strategy", "pearson", "spearman", "seconds");
    for hs in strategies {
        let t = Instant::now();
        let s = influence(&model, &ds, &part, &g, &hs, cfg.weight_decay, 1)?;
        println!(
            "{:<22} {:>8.3} {:>8.3} {:>9.4}",
            s.label(),
            pearson(&s.scores, &exact.scores),
            spearman(&s.scores, &exact.scores),
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
