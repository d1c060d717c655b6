//! Compare the four grouping methods on the same noisy dataset: group
//! sizes and how concentrated the flipped labels are per group.

use ggda::datahub::{flip_labels, make_blobs};
use ggda::grouping::{group, GroupingMethod};
use ggda::models::{train, Architecture, TrainConfig};
use ggda::numkit::rng;

fn main() -> ggda::Result<()> {
    let clean = make_blobs(800, 5, 3, 2.5, &mut rng(1))?;
    let (ds, rec) = flip_labels(&clean, 0.2, &mut rng(2))?;
    let flipped = rec.is_flipped(ds.n_train());
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 32,
        ..Default::default()
    };
    let (model, _) = train(&Architecture::mlp(5, &[16], 3), &ds, &cfg, 0)?;

    for method in [
        GroupingMethod::Random,
        GroupingMethod::KMeans,
        GroupingMethod::ReprKMeans,
        GroupingMethod::GradKMeans,
    ] {
        let part = group(&ds, Some(&model), method, 16, 7)?;
        let sizes = part.sizes();
        // share of flipped points that sit in groups which are mostly flipped
        let mut captured = 0;
        for g in &part.groups {
            let f = g.iter().filter(|&&i| flipped[i]).count();
            if 2 * f > g.len() {
                captured += f;
            }
        }
        println!(
            "{:<12} k={:<3} sizes {}..{}  flipped points in majority-flipped groups: {:.2}",
            method.name(),
            part.k(),
            sizes.iter().min().unwrap(),
            sizes.iter().max().unwrap(),
            captured as f64 / rec.flipped_indices.len() as f64
        );
    }
    Ok(())
}
