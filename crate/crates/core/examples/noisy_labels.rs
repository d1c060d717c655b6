//! Mislabeled-point detection: rank training points by the score of their
//! group and measure the detection AUC at several group sizes.

use ggda::attributors::{influence, tracin, PropertyFn};
use ggda::datahub::{flip_labels, make_blobs};
use ggda::evalkit::noisy_label_auc;
use ggda::grouping::{group, GroupingMethod, Partition};
use ggda::hessians::HessianStrategy;
use ggda::models::{train, Architecture, Optimizer, TrainConfig};
use ggda::numkit::rng;

fn main() -> ggda::Result<()> {
    let clean = make_blobs(1000, 2, 2, 2.0, &mut rng(1))?;
    let (ds, rec) = flip_labels(&clean, 0.2, &mut rng(2))?;
    let cfg = TrainConfig {
        learning_rate: 0.1,
        epochs: 30,
        batch_size: 32,
        weight_decay: 1e-3,
        optimizer: Optimizer::Momentum { beta: 0.9 },
        ..Default::default()
    };
    let (model, ckpts) = train(&Architecture::logreg(2, 2), &ds, &cfg, 10)?;
    let g = PropertyFn::MeanTestLoss;

    let single = Partition::singletons(ds.n_train());
    let exact = influence(
        &model,
        &ds,
        &single,
        &g,
        &HessianStrategy::Exact { damp: 0.0 },
        cfg.weight_decay,
        0,
    )?;
    println!(
        "influence (exact), per point: AUC {:.3}",
        noisy_label_auc(&exact, &rec)?
    );
    println!("perfect ranking would give {:.3}", 1.0 - rec.fraction / 2.0);

    for size in [1, 4, 16, 64] {
        let part = group(&ds, Some(&model), GroupingMethod::GradKMeans, size, 0)?;
        let s = tracin(&ckpts, &ds, &part, &g)?;
        println!("tracin, group size {size:>2}: AUC {:.3}", noisy_label_auc(&s, &rec)?);
    }
    Ok(())
}
