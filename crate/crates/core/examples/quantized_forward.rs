//! INT8 fake quantization: round-trip error per block, and how much the
//! quantized sparse branch moves the forward output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sla2::attention::{sla2_forward_blockwise, AttentionInputs, ForwardOptions, MixRatio};
use sla2::autodiff::hard_routing;
use sla2::numerics::Mat;
use sla2::quant::{dequantize, quantize, QuantConfig};
use sla2::router::RouterParams;
use sla2::train::diffusion::gaussian;

fn main() -> sla2::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let block = gaussian(16, 32, &mut rng).scale(3.0);
    let q = quantize(&block);
    let back: Mat = dequantize(&q);
    println!(
        "16x32 block: scale {:.4}, max round-trip error {:.4} (bound scale/2 = {:.4})",
        q.scale,
        back.max_abs_diff(&block),
        q.scale / 2.0
    );

    let (n, d) = (256, 32);
    let x = AttentionInputs::new(
        gaussian(n, d, &mut rng),
        gaussian(n, d, &mut rng),
        gaussian(n, d, &mut rng),
        16,
        8,
    )?;
    let alpha = MixRatio::zeros(x.tm());
    let routing = hard_routing(&x, &RouterParams::identity(d, 0.1), 10.0)?;
    let (plain, _) = sla2_forward_blockwise(&x, &routing, &alpha, &ForwardOptions::default())?;
    let (quant, _) = sla2_forward_blockwise(
        &x,
        &routing,
        &alpha,
        &ForwardOptions::quantized(QuantConfig::int8()),
    )?;
    println!(
        "N={n} d={d} at 90% sparsity: max |quantized - full precision| {:.2e}",
        quant.max_abs_diff(&plain)
    );
    Ok(())
}
