//! Distance between the per-sample empirical Fisher and its batched
//! version for gradient-aligned and random groups.

use ggda::datahub::make_blobs;
use ggda::grouping::{group, random_partition, GroupingMethod};
use ggda::hessians::{build_fisher, fisher_frobenius_gap, ModelContext, Projection};
use ggda::models::{train, Architecture, TrainConfig};
use ggda::numkit::rng;

fn main() -> ggda::Result<()> {
    let ds = make_blobs(400, 4, 3, 1.5, &mut rng(6))?;
    let cfg = TrainConfig {
        epochs: 40,
        batch_size: 32,
        weight_decay: 1e-3,
        ..Default::default()
    };
    let (model, _) = train(&Architecture::mlp(4, &[8], 3), &ds, &cfg, 0)?;
    let ctx = ModelContext::new(&model, &ds, cfg.weight_decay);
    let (full, _) = build_fisher(&ctx, None, Projection::None, 1e-3, &mut rng(0))?;
    let norm = full.matrix().mapv(|v| v * v).sum().sqrt();
    println!("‖F̂‖_F = {norm:.3}");
    for size in [2, 4, 8, 16] {
        let gk = group(&ds, Some(&model), GroupingMethod::GradKMeans, size, 0)?;
        let rp = random_partition(ds.n_train(), size, &mut rng(0))?;
        let (fg, _) = build_fisher(&ctx, Some(&gk), Projection::None, 1e-3, &mut rng(0))?;
        let (fr, _) = build_fisher(&ctx, Some(&rp), Projection::None, 1e-3, &mut rng(0))?;
        println!(
            "size {size:>2}: ‖F̂b − F̂‖_F grad-kmeans {:.3}, random {:.3}",
            fisher_frobenius_gap(&fg, &full),
            fisher_frobenius_gap(&fr, &full)
        );
    }
    Ok(())
}
