//! Retraining score and dataset pruning: remove the top-ranked groups and
//! retrain, against uniformly random removal.

use ggda::attributors::{tracin, PropertyFn};
use ggda::datahub::{flip_labels, make_blobs};
use ggda::evalkit::{pruning_eval, random_removal_eval, retraining_score};
use ggda::grouping::{group, GroupingMethod};
use ggda::models::{train, Architecture, Optimizer, TrainConfig};
use ggda::numkit::rng;

fn main() -> ggda::Result<()> {
    let clean = make_blobs(1000, 2, 2, 2.0, &mut rng(1))?;
    let (ds, _) = flip_labels(&clean, 0.2, &mut rng(2))?;
    let arch = Architecture::logreg(2, 2);
    let cfg = TrainConfig {
        learning_rate: 0.1,
        epochs: 30,
        batch_size: 32,
        weight_decay: 1e-3,
        optimizer: Optimizer::Momentum { beta: 0.9 },
        ..Default::default()
    };
    let (model, ckpts) = train(&arch, &ds, &cfg, 10)?;
    let part = group(&ds, Some(&model), GroupingMethod::GradKMeans, 16, 0)?;
    let scores = tracin(&ckpts, &ds, &part, &PropertyFn::MeanTestLoss)?;

    let fractions = [0.01, 0.05, 0.1, 0.2];
    let top = retraining_score(&scores, &arch, &ds, &cfg, &fractions, 10, 0)?;
    let rnd = random_removal_eval(&arch, &ds, &cfg, &fractions, 10, 0)?;
    println!(
        "full data accuracy {:.3}",
        top.baseline.as_ref().map_or(f64::NAN, |b| b.mean)
    );
    println!("removed  top-first  random");
    for (t, r) in top.rows.iter().zip(&rnd.rows) {
        println!(
            "{:>6.0}%  {:.3}±{:.3}  {:.3}±{:.3}",
            100.0 * t.fraction,
            t.mean,
            t.stderr,
            r.mean,
            r.stderr
        );
    }

    let pruned = pruning_eval(&scores, &arch, &ds, &cfg, &[0.25, 0.5], 10, 0)?;
    print!("{}", pruned.to_csv());
    Ok(())
}
