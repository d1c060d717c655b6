//! For a binary model the loss-gradient outer product is a scalar multiple
//! of the margin-gradient outer product; the scalar tends to 1/(4T²).

use ggda::datahub::make_blobs;
use ggda::hessians::trak_fisher_equivalence_check;
use ggda::models::{Architecture, ModelState};
use ggda::numkit::rng;

fn main() -> ggda::Result<()> {
    let ds = make_blobs(200, 3, 2, 1.0, &mut rng(4))?;
    let model = ModelState::init(Architecture::mlp(3, &[8], 2), &mut rng(5))?;
    let rows = ds.train_rows();
    for t in [1.0, 10.0, 1e3, 1e6] {
        let rep = trak_fisher_equivalence_check(&model, &ds, rows, t)?;
        let (lo, hi) = rep
            .c_times_4t2
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        println!(
            "T={t:>8}: max deviation {:.1e}, C·4T² over points in [{lo:.6}, {hi:.6}]",
            rep.max_deviation
        );
    }
    Ok(())
}
