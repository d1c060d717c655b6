//! Train a small MLP, group the training set by gradient similarity and
//! score every group with influence functions.

use ggda::attributors::{influence, PropertyFn};
use ggda::datahub::make_blobs;
use ggda::grouping::{group, GroupingMethod};
use ggda::hessians::{HessianStrategy, Projection};
use ggda::models::{train, Architecture, Optimizer, TrainConfig};
use ggda::numkit::rng;

fn main() -> ggda::Result<()> {
    let ds = make_blobs(1000, 4, 3, 2.0, &mut rng(0))?;
    let arch = Architecture::mlp(4, &[32], 3);
    let cfg = TrainConfig {
        learning_rate: 0.05,
        epochs: 40,
        batch_size: 32,
        weight_decay: 1e-3,
        optimizer: Optimizer::Momentum { beta: 0.9 },
        ..Default::default()
    };
    let (model, _) = train(&arch, &ds, &cfg, 0)?;
    println!("test accuracy {:.3}", model.accuracy(&ds, ds.test_rows()));

    let part = group(&ds, Some(&model), GroupingMethod::GradKMeans, 16, 0)?;
    let hs = HessianStrategy::BatchedEmpFisher {
        projection: Projection::Gaussian { dim: 32 },
        damp: 1e-3,
    };
    let scores = influence(&model, &ds, &part, &PropertyFn::MeanTestLoss, &hs, cfg.weight_decay, 0)?;
    println!(
        "{} groups scored with {} gradient passes",
        part.k(),
        scores.train_passes
    );

    let mut order: Vec<usize> = (0..part.k()).collect();
    order.sort_by(|&a, &b| scores.scores[b].total_cmp(&scores.scores[a]));
    for &j in order.iter().take(5) {
        println!(
            "group {j:>3} size {:>2} score {:+.4}",
            part.groups[j].len(),
            scores.scores[j]
        );
    }
    Ok(())
}
