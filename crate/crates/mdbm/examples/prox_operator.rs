//! The simplex proximal operator behind the damped mean-field iteration:
//! softmax at alpha = 1, Lambert-W territory below it, with analytic
//! derivatives. Run with `cargo run --release --example prox_operator`.

use mdbm::prox::{self, ProxConfig};

fn main() -> mdbm::Result<()> {
    println!("Lambert W on the principal branch:");
    for x in [0.0, 1.0, std::f64::consts::E, 10.0, 1e6] {
        let w = prox::lambert_w(x)?;
        println!("  W({x:>9.3e}) = {w:.12}  (residual {:.1e})", (w * w.exp() - x).abs());
    }

    let x = [0.3, -0.1, 0.7];
    println!("\nprox of x = {x:?} across damping values:");
    for alpha in [0.05, 0.125, 0.5, 0.95, 1.0] {
        let cfg = ProxConfig::with_alpha(alpha);
        let r = prox::prox_alpha(&x, &cfg)?;
        let sum: f64 = r.z.iter().sum();
        println!(
            "  alpha {alpha:<5}: z = [{:.6}, {:.6}, {:.6}]  sum-1 = {:+.1e}  KKT = {:.1e}",
            r.z[0],
            r.z[1],
            r.z[2],
            sum - 1.0,
            r.kkt_residual(&x, alpha)
        );
    }

    // the vector-Jacobian product is assembled analytically; rows of the
    // Jacobian sum to zero because the output stays on the simplex
    let cfg = ProxConfig::with_alpha(0.3);
    let r = prox::prox_alpha(&x, &cfg)?;
    let ones = prox::prox_alpha_vjp(&r, &x, &[1.0, 1.0, 1.0], &cfg)?;
    println!("\nvjp with upstream = 1 (must vanish): {ones:?}");
    Ok(())
}
