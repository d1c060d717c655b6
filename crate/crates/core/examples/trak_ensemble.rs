//! TRAK as an ensemble of projected batched-Fisher influence estimates on
//! subsampled models. Two ensembles with independent seeds are compared as
//! members are added; with one member each covers only half the points.

use ggda::attributors::{trak, PropertyFn, TrakParams};
use ggda::datahub::make_blobs;
use ggda::grouping::{group, GroupingMethod};
use ggda::hessians::Projection;
use ggda::models::{Architecture, TrainConfig};
use ggda::numkit::{rng, spearman};

fn main() -> ggda::Result<()> {
    let ds = make_blobs(500, 4, 2, 2.0, &mut rng(8))?;
    let arch = Architecture::mlp(4, &[16], 2);
    let cfg = TrainConfig {
        epochs: 25,
        batch_size: 32,
        weight_decay: 1e-3,
        ..Default::default()
    };
    let part = group(&ds, None, GroupingMethod::KMeans, 2, 0)?;
    let g = PropertyFn::MeanTestLoss;
    let run = |members: usize, seed: u64| {
        let params = TrakParams {
            members,
            subsample_frac: 0.5,
            projection: Projection::Gaussian { dim: 32 },
            damp: 1e-3,
        };
        trak(&arch, &cfg, &ds, &part, &g, &params, seed)
    };
    for members in [1, 2, 4, 8, 16] {
        let a = run(members, 1)?;
        let b = run(members, 2)?;
        println!(
            "{members} member(s): spearman between two independent ensembles {:.3}",
            spearman(&a.scores, &b.scores)
        );
    }
    Ok(())
}
