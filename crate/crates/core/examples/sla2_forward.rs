//! The dense reference and the block-streaming forward on the same inputs,
//! in double and single precision, plus the two limiting cases of the mix.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sla2::attention::{
    full_attention, sla2_forward_blockwise, sla2_forward_naive, AttentionInputs, ForwardOptions,
    MixRatio,
};
use sla2::autodiff::hard_routing;
use sla2::router::{BlockMask, RouterOutput, RouterParams};
use sla2::train::diffusion::gaussian;

fn main() -> sla2::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (n, d, bq, bk) = (256, 32, 16, 8);
    let x = AttentionInputs::new(
        gaussian(n, d, &mut rng),
        gaussian(n, d, &mut rng),
        gaussian(n, d, &mut rng),
        bq,
        bk,
    )?;
    let alpha = MixRatio::from_rho(gaussian(x.tm(), 1, &mut rng).into_data())?;
    let opts = ForwardOptions::default();
    let full = full_attention(&x.q, &x.k, &x.v)?;

    for k in [3.0, 5.0, 10.0, 25.0] {
        let routing = hard_routing(&x, &RouterParams::identity(d, 0.1), k)?;
        let naive = sla2_forward_naive(&x, &routing, &alpha, &opts)?;
        let (blockwise, _) = sla2_forward_blockwise(&x, &routing, &alpha, &opts)?;
        let x32 = x.cast::<f32>();
        let (b32, _) = sla2_forward_blockwise(&x32, &routing, &alpha, &opts)?;
        let n32 = sla2_forward_naive(&x32, &routing, &alpha, &opts)?;
        println!(
            "k={k:>4}%: |blockwise - naive| f64 {:.1e}, f32 {:.1e}; |output - full attention| {:.3}",
            blockwise.max_abs_diff(&naive),
            b32.max_abs_diff(&n32),
            blockwise.max_abs_diff(&full)
        );
    }

    // every block kept: the linear branch is empty and the mix collapses to softmax attention
    let all = RouterOutput::Hard(BlockMask::all_ones(x.tm(), x.tn()));
    let (out, _) = sla2_forward_blockwise(&x, &all, &MixRatio::zeros(x.tm()), &opts)?;
    println!(
        "all blocks kept, rho = 0: |output - full attention| {:.1e}",
        out.max_abs_diff(&full)
    );
    Ok(())
}
