//! Round trip through files: export a dataset to CSV, load it back, score
//! groups and write the score file as JSON and CSV.

use ggda::attributors::{influence, PropertyFn};
use ggda::datahub::{load_csv, make_blobs, read_scores, write_scores};
use ggda::grouping::{group, GroupingMethod};
use ggda::hessians::HessianStrategy;
use ggda::models::{train, Architecture, TrainConfig};
use ggda::numkit::rng;

fn main() -> ggda::Result<()> {
    let dir = std::env::temp_dir().join("ggda-csv-example");
    let csv = dir.join("blobs.csv");
    make_blobs(300, 3, 2, 2.0, &mut rng(9))?.write_csv(&csv)?;

    let ds = load_csv(&csv, "label")?;
    println!("loaded {} rows: {} train, {} test", ds.len(), ds.n_train(), ds.n_test());
    let cfg = TrainConfig {
        epochs: 50,
        batch_size: 32,
        weight_decay: 1e-2,
        ..Default::default()
    };
    let (model, _) = train(&Architecture::logreg(3, 2), &ds, &cfg, 0)?;
    let part = group(&ds, None, GroupingMethod::KMeans, 10, 0)?;
    let scores = influence(
        &model,
        &ds,
        &part,
        &PropertyFn::MeanTestLoss,
        &HessianStrategy::Exact { damp: 0.0 },
        cfg.weight_decay,
        0,
    )?;

    let out = dir.join("scores.json");
    write_scores(&scores.to_score_file(), &out)?;
    let back = read_scores(&out)?;
    println!(
        "wrote {} groups to {} (and scores.csv)",
        back.group_members.len(),
        out.display()
    );
    Ok(())
}
