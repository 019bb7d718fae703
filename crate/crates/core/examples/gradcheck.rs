//! The hand-written backward against central differences of `<G, O>` for
//! every input, then the same check with a deliberately broken dV.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sla2::attention::{
    sla2_backward, sla2_forward_blockwise, AttentionInputs, BackwardOptions, Fault, ForwardOptions,
    MixRatio,
};
use sla2::autodiff::{finite_diff_errors, hard_routing};
use sla2::numerics::Mat;
use sla2::router::RouterParams;
use sla2::train::diffusion::gaussian;

fn main() -> sla2::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (n, d, bq, bk) = (32, 8, 8, 4);
    let x = AttentionInputs::new(
        gaussian(n, d, &mut rng),
        gaussian(n, d, &mut rng),
        gaussian(n, d, &mut rng),
        bq,
        bk,
    )?;
    let rho = gaussian(x.tm(), 1, &mut rng);
    let g = gaussian(n, d, &mut rng);
    let routing = hard_routing(&x, &RouterParams::identity(d, 0.1), 25.0)?;
    let opts = ForwardOptions::default();

    let objective = |leaves: &[Mat]| -> sla2::Result<f64> {
        let xi = AttentionInputs::new(
            leaves[0].clone(),
            leaves[1].clone(),
            leaves[2].clone(),
            bq,
            bk,
        )?;
        let alpha = MixRatio::from_rho(leaves[3].data().to_vec())?;
        let (o, _) = sla2_forward_blockwise(&xi, &routing, &alpha, &opts)?;
        Ok(o.data().iter().zip(g.data()).map(|(a, b)| a * b).sum())
    };
    let leaves = [x.q.clone(), x.k.clone(), x.v.clone(), rho.clone()];
    let alpha = MixRatio::from_rho(rho.data().to_vec())?;
    let (_, saved) = sla2_forward_blockwise(&x, &routing, &alpha, &opts)?;

    for fault in [None, Some(Fault::DvAssign)] {
        let grads = sla2_backward(&x, &saved, &alpha, &g, &BackwardOptions { fault })?;
        let analytic = [
            grads.dq,
            grads.dk,
            grads.dv,
            Mat::new(x.tm(), 1, grads.d_rho)?,
        ];
        let errs = finite_diff_errors(&leaves, &analytic, 1e-5, objective)?;
        println!(
            "{:<14} max relative error dQ {:.1e}  dK {:.1e}  dV {:.1e}  dRho {:.1e}",
            match fault {
                None => "correct",
                Some(_) => "dV overwrite",
            },
            errs[0],
            errs[1],
            errs[2],
            errs[3]
        );
    }
    Ok(())
}
