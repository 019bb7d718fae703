//! Hard Top-k next to its sigmoid relaxation on one set of pooled block
//! scores, at the training temperature and at a nearly hard one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sla2::attention::AttentionInputs;
use sla2::numerics::Mat;
use sla2::quant::smooth_k;
use sla2::router::{block_scores, hard_topk, keep_count, soft_topk, RouterParams};
use sla2::train::diffusion::gaussian;

fn main() -> sla2::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, d, bq, bk) = (128, 16, 16, 8);
    let x = AttentionInputs::new(
        gaussian(n, d, &mut rng),
        gaussian(n, d, &mut rng),
        gaussian(n, d, &mut rng),
        bq,
        bk,
    )?;
    let router = RouterParams::identity(d, 0.1);
    let pc = block_scores(&x.q, &smooth_k(&x.k).0, &router, bq, bk)?;
    let k_percent = 25.0;
    println!(
        "{}x{} block scores, keep {} per row",
        pc.rows(),
        pc.cols(),
        keep_count(k_percent, pc.cols())
    );

    let hard = hard_topk(&pc, k_percent)?;
    let kept: Vec<usize> = hard.kept_in_row(0).collect();
    println!(
        "hard Top-k keeps blocks {kept:?} in row 0, sparsity {:.1}%",
        100.0 * hard.sparsity()
    );

    // pooled scores after the row softmax sit within a few hundredths of each
    // other, so at the training temperature the relaxation is nearly flat
    let soft = soft_topk(&pc, k_percent, 0.1)?;
    let row0: Vec<String> = soft
        .values
        .row(0)
        .iter()
        .map(|v| format!("{v:.2}"))
        .collect();
    let sum0: f64 = soft.values.row(0).iter().sum();
    println!("tau 0.1, row 0: [{}] sums to {sum0:.6}", row0.join(" "));

    // separated scores: at a small temperature the relaxation becomes the hard mask
    let tn = pc.cols();
    let ladder = Mat::from_fn(1, tn, |_, j| ((j * 7) % tn) as f64 / tn as f64);
    for tau in [0.1, 1e-2, 1e-3] {
        let soft = soft_topk(&ladder, k_percent, tau)?;
        let hard = hard_topk(&ladder, k_percent)?.to_matrix();
        println!(
            "ladder row, tau {tau:>6}: max |soft - hard| {:.2e}, lambda {:.2}",
            soft.values.max_abs_diff(&hard),
            soft.lambdas.get(0)
        );
    }
    Ok(())
}
