//! Wall-clock and gradient-pass counts of grouped attribution against
//! per-point attribution.

use ggda::attributors::PropertyFn;
use ggda::datahub::make_blobs;
use ggda::evalkit::bench_da_vs_ggda;
use ggda::hessians::HessianStrategy;
use ggda::models::{Architecture, ModelState};
use ggda::numkit::rng;

fn main() -> ggda::Result<()> {
    let ds = make_blobs(10_000, 10, 2, 2.0, &mut rng(0))?;
    let model = ModelState::init(Architecture::mlp(10, &[64], 2), &mut rng(1))?;
    let report = bench_da_vs_ggda(
        &model,
        &ds,
        &PropertyFn::MeanTestLoss,
        &HessianStrategy::Identity,
        0.0,
        &[1, 4, 16, 64, 256, 1024],
        3,
        0,
    )?;
    print!("{}", report.to_csv());
    Ok(())
}
