//! TracIn over training snapshots, and how the scores change with the
//! number of checkpoints used.

use ggda::attributors::{tracin, PropertyFn};
use ggda::datahub::make_blobs;
use ggda::grouping::{group, GroupingMethod};
use ggda::models::{train, Architecture, Checkpoints, TrainConfig};
use ggda::numkit::{rng, spearman};

fn main() -> ggda::Result<()> {
    let ds = make_blobs(600, 3, 2, 1.5, &mut rng(5))?;
    let cfg = TrainConfig {
        epochs: 50,
        batch_size: 32,
        ..Default::default()
    };
    let (_, ckpts) = train(&Architecture::mlp(3, &[16], 2), &ds, &cfg, 10)?;
    println!("{} checkpoints", ckpts.states.len());

    let part = group(&ds, Some(ckpts.last()), GroupingMethod::GradKMeans, 12, 0)?;
    let g = PropertyFn::TestPointLoss { index: 0 };
    let all = tracin(&ckpts, &ds, &part, &g)?;
    for used in 1..=ckpts.states.len() {
        let tail = Checkpoints {
            states: ckpts.states[ckpts.states.len() - used..].to_vec(),
        };
        let s = tracin(&tail, &ds, &part, &g)?;
        println!(
            "last {used} checkpoint(s): spearman vs all {:.3}, passes {}",
            spearman(&s.scores, &all.scores),
            s.train_passes
        );
    }
    Ok(())
}
