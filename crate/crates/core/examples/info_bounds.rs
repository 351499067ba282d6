//! Data processing inequality, the InfoNCE lower bound and k-NN estimates
//! against closed forms.

use geoslot::infolab::{binary_symmetric, dpi_check, gaussian_mi, knn_mi, nce_bound_check, ChainSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> geoslot::Result<()> {
    let chain = ChainSpec {
        head: vec![0.5, 0.5],
        transitions: vec![binary_symmetric(0.1), binary_symmetric(0.2)],
    };
    let r = dpi_check(&chain)?;
    println!("DPI: I(X;Y) {:.4} >= I(X;Z) {:.4}", r.i_head_mid, r.i_head_tail);

    for rho in [0.0, 0.5, 0.9] {
        let r = nce_bound_check(rho, 1.0, 32, 200, 0.05, 1)?;
        println!("InfoNCE rho {rho}: ln N - loss {:.3}, exact {:.3}, holds {}", r.bound, r.exact_mi, r.holds);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rho: f64 = 0.8;
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for _ in 0..2000 {
        let a: f64 = StandardNormal.sample(&mut rng);
        let b: f64 = StandardNormal.sample(&mut rng);
        x.push(vec![a]);
        y.push(vec![rho * a + (1.0 - rho * rho).sqrt() * b]);
    }
    println!("k-NN MI {:.3} vs closed form {:.3}", knn_mi(&x, &y, 3, None)?, gaussian_mi(rho));
    Ok(())
}
