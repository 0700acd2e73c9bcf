//! The proximal operator of the entropy-minus-squared-norm function on the
//! probability simplex,
//!
//! ```text
//! f(z) = sum_i z_i log z_i - 0.5 ||z||^2 + indicator{ sum_i z_i = 1, z >= 0 },
//! ```
//!
//! together with the Lambert W pieces needed to evaluate it and the analytic
//! derivatives needed to differentiate through it.
//!
//! `prox_f^1` is exactly softmax; for `alpha` in `(0,1)` the solution is
//! `z_i = (alpha/(1-alpha)) W(((1-alpha)/alpha) exp((x_i - alpha + lambda)/alpha))`
//! with `lambda` normalizing the sum to one. Evaluating that expression
//! directly overflows for small `alpha`, so everything below works with
//! `g(y) = log z`, the root of `h(g) = y - alpha - (1-alpha) e^g - alpha g`,
//! solved by Halley's method, with `lambda` found by Newton's method on
//! `s(lambda) = sum_i exp(g(x_i + lambda)) - 1`.

use crate::error::{Error, Result};

/// Parameters for the prox solves. `alpha` is the damping weight of the
/// proximal step; the remaining fields bound the two inner root-finders.
#[derive(Debug, Clone)]
pub struct ProxConfig {
    pub alpha: f64,
    pub halley_tol: f64,
    pub halley_max_iter: usize,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
}

impl Default for ProxConfig {
    fn default() -> Self {
        Self {
            alpha: 0.125,
            halley_tol: 1e-12,
            halley_max_iter: 30,
            newton_tol: 1e-10,
            newton_max_iter: 50,
        }
    }
}

impl ProxConfig {
    pub fn with_alpha(alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config(format!(
                "prox alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        if self.halley_tol <= 0.0 || self.newton_tol <= 0.0 {
            return Err(Error::config("prox tolerances must be positive"));
        }
        Ok(())
    }
}

/// Output of one prox evaluation. `lambda` follows the convention
/// `z_i = exp(g(x_i + lambda))`, so shifting `x` by `c` shifts `lambda`
/// by `-c`.
#[derive(Debug, Clone)]
pub struct ProxResult {
    pub z: Vec<f64>,
    pub lambda: f64,
    /// Per-coordinate `log z_i`.
    pub g_values: Vec<f64>,
}

impl ProxResult {
    /// Stationarity residual of the KKT system this result is supposed to
    /// solve, per coordinate: `-x_i + z_i + a + a log z_i - a z_i - lambda`.
    pub fn kkt_residual(&self, x: &[f64], alpha: f64) -> f64 {
        if alpha == 1.0 {
            // softmax stationarity: log z_i = x_i + lambda - 1
            return self
                .z
                .iter()
                .zip(x)
                .map(|(&z, &xi)| (z.ln() - xi - self.lambda + 1.0).abs())
                .fold(0.0, f64::max);
        }
        let mut worst = 0.0f64;
        for i in 0..x.len() {
            let z = self.z[i];
            let r = -x[i] + z + alpha + alpha * self.g_values[i] - alpha * z - self.lambda;
            worst = worst.max(r.abs());
        }
        worst
    }
}

/// Numerically stable softmax, in place.
pub fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// Principal branch of the Lambert W function on `x >= 0`, by Halley
/// iteration on `w e^w - x`.
pub fn lambert_w(x: f64) -> Result<f64> {
    if !x.is_finite() || x < 0.0 {
        return Err(Error::domain(format!(
            "lambert_w requires finite x >= 0, got {x}"
        )));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    let mut w = if x < std::f64::consts::E {
        // small-argument start; exact at both endpoints of [0, e]
        x / (1.0 + x) * (1.0 + (1.0 + x).ln())
    } else {
        let lx = x.ln();
        lx - lx.ln()
    };
    for _ in 0..40 {
        let ew = w.exp();
        let f = w * ew - x;
        if f.abs() <= 0.5e-12 * x.max(1.0) {
            return Ok(w);
        }
        let fp = ew * (w + 1.0);
        let fpp = ew * (w + 2.0);
        let step = 2.0 * f * fp / (2.0 * fp * fp - f * fpp);
        w -= step;
        if step.abs() <= f64::EPSILON * w.abs() {
            break;
        }
    }
    let res = (w * w.exp() - x).abs() / x.max(1.0);
    if res <= 1e-12 {
        Ok(w)
    } else {
        Err(Error::NoConvergence {
            context: format!("lambert_w({x})"),
            residual: res,
            iterations: 40,
        })
    }
}

/// `h(g; y) = y - alpha - (1-alpha) e^g - alpha g`, whose unique root is
/// `g(y) = log prox` for one scalar coordinate.
#[inline]
fn h_eval(g: f64, y: f64, alpha: f64) -> (f64, f64, f64) {
    let eg = g.exp();
    let h = y - alpha - (1.0 - alpha) * eg - alpha * g;
    let hp = -alpha - (1.0 - alpha) * eg;
    let hpp = -(1.0 - alpha) * eg;
    (h, hp, hpp)
}

fn log_prox_initial(y: f64, alpha: f64) -> f64 {
    if y < 0.0 {
        // h(g) ~ y - alpha - alpha*g for very negative g
        y / alpha - 1.0
    } else {
        ((y - alpha).max(1e-12) / (1.0 - alpha)).ln()
    }
}

/// Root of `h(.; y, alpha)` by Halley's method, i.e. `log prox` for one
/// scalar coordinate. `alpha` must lie in `(0,1)`; the softmax case is
/// handled in [`prox_alpha`].
pub fn log_prox_scalar(y: f64, alpha: f64, tol: f64, max_iter: usize) -> Result<f64> {
    log_prox_scalar_from(y, alpha, log_prox_initial(y, alpha), tol, max_iter)
}

/// As [`log_prox_scalar`] but starting from a caller-supplied guess (used to
/// warm-start across Newton iterations on lambda).
pub fn log_prox_scalar_from(
    y: f64,
    alpha: f64,
    guess: f64,
    tol: f64,
    max_iter: usize,
) -> Result<f64> {
    debug_assert!(alpha > 0.0 && alpha < 1.0);
    let scale = y.abs().max(1.0);
    let mut g = guess;
    if !g.is_finite() {
        g = log_prox_initial(y, alpha);
    }
    let mut last_res = f64::INFINITY;
    for _ in 0..max_iter {
        let (h, hp, hpp) = h_eval(g, y, alpha);
        if !h.is_finite() {
            // overshoot into exp overflow; restart from the asymptotic guess
            g = log_prox_initial(y, alpha);
            continue;
        }
        last_res = h.abs();
        if last_res <= tol * scale {
            return Ok(g);
        }
        let denom = 2.0 * hp * hp - h * hpp;
        let step = if denom != 0.0 { 2.0 * h * hp / denom } else { h / hp };
        g -= step;
    }
    // h is strictly decreasing, so a sign-change bracket always exists.
    let (mut lo, mut hi) = (g.min(-1.0), g.max(1.0));
    while h_eval(lo, y, alpha).0 <= 0.0 {
        lo = lo * 2.0 - 1.0;
        if lo < -1e18 {
            break;
        }
    }
    while h_eval(hi, y, alpha).0 >= 0.0 {
        hi = hi * 2.0 + 1.0;
        if hi > 1e18 {
            break;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let (h, _, _) = h_eval(mid, y, alpha);
        if h.abs() <= tol * scale {
            return Ok(mid);
        }
        if h > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if (hi - lo).abs() <= f64::EPSILON * mid.abs().max(1.0) {
            g = mid;
            last_res = h.abs();
            break;
        }
    }
    if last_res <= tol * scale * 16.0 {
        return Ok(g);
    }
    Err(Error::NoConvergence {
        context: format!("log_prox_scalar(y={y}, alpha={alpha})"),
        residual: last_res,
        iterations: max_iter,
    })
}

/// `prox_f^alpha(x)` for one categorical variable.
///
/// `alpha = 1` is exact softmax. For `alpha` in `(0,1)` the simplex
/// multiplier is found by Newton's method on the shifted input
/// `x - max(x)`, whose root always lies in `(-inf, 1)`; a guarded
/// bisection takes over if a Newton step leaves that domain or fails to
/// shrink `|s|`.
pub fn prox_alpha(x: &[f64], config: &ProxConfig) -> Result<ProxResult> {
    config.validate()?;
    let k = x.len();
    if k == 0 {
        return Err(Error::domain("prox_alpha on an empty slice"));
    }
    if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("prox_alpha input entry {bad}")));
    }
    let alpha = config.alpha;
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    if k == 1 {
        // z = 1 forced; g(x + lambda) = 0 requires x + lambda = 1
        return Ok(ProxResult {
            z: vec![1.0],
            lambda: 1.0 - x[0],
            g_values: vec![0.0],
        });
    }

    if alpha == 1.0 {
        let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let g: Vec<f64> = x.iter().map(|v| v - lse).collect();
        let z: Vec<f64> = g.iter().map(|v| v.exp()).collect();
        return Ok(ProxResult {
            z,
            lambda: 1.0 - lse,
            g_values: g,
        });
    }

    let mut z = vec![0.0f64; k];
    let mut g = vec![0.0f64; k];
    let lam = prox_alpha_into(x, config, &mut z, &mut g, None)?;
    Ok(ProxResult {
        z,
        lambda: lam,
        g_values: g,
    })
}

/// Allocation-free core of [`prox_alpha`]: writes `z` and `log z` into the
/// caller's buffers and returns `lambda`. `k >= 2` and `alpha` in `(0,1)`
/// are the caller's responsibility (the wrapper handles the special cases).
/// A warm multiplier from a nearby solve (and the matching `g` contents)
/// cuts the Newton iterations substantially inside fixed-point loops.
pub fn prox_alpha_into(
    x: &[f64],
    config: &ProxConfig,
    z: &mut [f64],
    g: &mut [f64],
    warm_lambda: Option<f64>,
) -> Result<f64> {
    let k = x.len();
    let alpha = config.alpha;
    debug_assert!(k >= 2 && alpha > 0.0 && alpha < 1.0);
    #[cfg(feature = "prox-stats")]
    PROX_CALLS.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    // shifted coordinates x - m are <= 0, so the root of
    // s(lambda) = sum_i z(x_i - m + lambda) - 1 lies in (-inf, 1)
    let eval_s = |lam: f64, g: &mut [f64], z: &mut [f64]| -> Result<(f64, f64)> {
        #[cfg(feature = "prox-stats")]
        PROX_EVALS.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        let mut s = -1.0;
        let mut ds = 0.0;
        for i in 0..k {
            let y = x[i] - m + lam;
            let gi =
                log_prox_scalar_from(y, alpha, g[i], config.halley_tol, config.halley_max_iter)
                    .map_err(|e| match e {
                        Error::NoConvergence {
                            residual,
                            iterations,
                            ..
                        } => Error::NoConvergence {
                            context: format!("prox_alpha coordinate {i} (y={y}, alpha={alpha})"),
                            residual,
                            iterations,
                        },
                        other => other,
                    })?;
            g[i] = gi;
            let zi = gi.exp();
            z[i] = zi;
            s += zi;
            // dz/dy = z / (alpha + (1-alpha) z)
            ds += zi / (alpha + (1.0 - alpha) * zi);
        }
        Ok((s, ds))
    };

    let mut lam = match warm_lambda {
        // warm lambda arrives in the unshifted convention; g already holds
        // the previous solve's values as Halley starts
        Some(l) => (l + m).min(1.0 - 1e-9),
        None => {
            let lse = x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            let l = (-lse).min(1.0 - 1e-9);
            for i in 0..k {
                g[i] = log_prox_initial(x[i] - m + l, alpha);
            }
            l
        }
    };
    let (mut s, mut ds) = eval_s(lam, g, z)?;

    // Newton safeguarded by the sign bracket: s is convex increasing with
    // s(1) > 0, so a step that leaves the bracket is replaced by its
    // midpoint (or a geometric extension while the left edge is unknown)
    let mut lo = f64::NEG_INFINITY;
    let mut hi = 1.0f64;
    let mut iterations = 0usize;
    let budget = config.newton_max_iter.max(60);
    while s.abs() > config.newton_tol {
        iterations += 1;
        if iterations > budget {
            return Err(Error::NoConvergence {
                context: format!("prox_alpha newton on lambda (alpha={alpha})"),
                residual: s.abs(),
                iterations,
            });
        }
        if s > 0.0 {
            hi = lam;
        } else {
            lo = lam;
        }
        let mut next = lam - s / ds;
        if !next.is_finite() || next <= lo || next >= hi {
            next = if lo.is_finite() {
                0.5 * (lo + hi)
            } else {
                hi - 2.0 * (hi - lam).max(1.0)
            };
        }
        lam = next;
        let (sn, dsn) = eval_s(lam, g, z)?;
        s = sn;
        ds = dsn;
    }
    Ok(lam - m)
}

/// Vector-Jacobian product `upstream^T (dz/dx)` at a previously computed
/// prox result, assembled from the implicit derivatives
/// `dz_i/dx_j = z_i (delta_ij + dlambda/dx_j) / (x_i + lambda - alpha log z_i)`
/// without unrolling either root-finder.
pub fn prox_alpha_vjp(
    result: &ProxResult,
    x: &[f64],
    upstream: &[f64],
    config: &ProxConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    let k = x.len();
    if result.z.len() != k || upstream.len() != k {
        return Err(Error::layout(format!(
            "prox_alpha_vjp length mismatch: x {}, z {}, upstream {}",
            k,
            result.z.len(),
            upstream.len()
        )));
    }
    let res = result.kkt_residual(x, config.alpha);
    if !(res <= 1e-6) {
        return Err(Error::domain(format!(
            "stale prox result: KKT residual {res:.3e} on recheck"
        )));
    }
    // x_i + lambda - alpha g_i = alpha + (1-alpha) z_i, which also covers
    // the softmax case alpha = 1 where the denominator is exactly 1.
    let alpha = config.alpha;
    let d: Vec<f64> = result
        .z
        .iter()
        .map(|&z| z / (alpha + (1.0 - alpha) * z))
        .collect();
    let dsum: f64 = d.iter().sum();
    let weighted: f64 = upstream.iter().zip(&d).map(|(u, di)| u * di).sum();
    let mean = weighted / dsum;
    Ok(upstream
        .iter()
        .zip(&d)
        .map(|(u, di)| di * (u - mean))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Bisection oracle for W: root of w e^w - x on [0, max(1, x)].
    fn lambert_w_bisect(x: f64) -> f64 {
        let (mut lo, mut hi) = (0.0f64, x.max(2.0));
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid * mid.exp() > x {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Bisection oracle for the root of h(g) = y - a - (1-a) e^g - a g.
    fn h_root_bisect(y: f64, alpha: f64) -> f64 {
        let (mut lo, mut hi) = (-1e6f64, 700.0f64);
        for _ in 0..300 {
            let mid = 0.5 * (lo + hi);
            let h = y - alpha - (1.0 - alpha) * mid.exp() - alpha * mid;
            if h > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Exponentiated-gradient oracle for the prox objective on the simplex,
    /// run until the stationarity spread is below `1e-10`. Shares no code
    /// with the Halley/Newton path.
    pub(crate) fn prox_oracle_eg(x: &[f64], alpha: f64) -> Vec<f64> {
        let k = x.len();
        let mut z = vec![1.0 / k as f64; k];
        let step = 0.25;
        for _ in 0..2_000_000 {
            let grad: Vec<f64> = (0..k)
                .map(|i| z[i] - x[i] + alpha * (1.0 + z[i].ln()) - alpha * z[i])
                .collect();
            let gmax = grad.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let gmin = grad.iter().cloned().fold(f64::INFINITY, f64::min);
            if gmax - gmin < 1e-10 {
                break;
            }
            let mut sum = 0.0;
            for i in 0..k {
                z[i] *= (-step * grad[i]).exp();
                sum += z[i];
            }
            for zi in z.iter_mut() {
                *zi /= sum;
            }
        }
        z
    }

    #[test]
    fn lambert_w_known_points() {
        assert_eq!(lambert_w(0.0).unwrap(), 0.0);
        assert!((lambert_w(std::f64::consts::E).unwrap() - 1.0).abs() < 1e-14);
        // frozen from the bisection oracle on w e^w - 1
        let w1 = lambert_w_bisect(1.0);
        assert!((w1 - 0.5671432904097838).abs() < 1e-12);
        assert!((lambert_w(1.0).unwrap() - w1).abs() < 1e-12);
    }

    #[test]
    fn lambert_w_rejects_negative() {
        assert!(lambert_w(-0.1).is_err());
        assert!(lambert_w(f64::NAN).is_err());
    }

    #[test]
    fn lambert_w_residual_on_log_grid() {
        // mirrors the verification sweep: x in [0, 1e6], log-spaced
        let mut x = 1e-9;
        while x <= 1e6 {
            let w = lambert_w(x).unwrap();
            let res = (w * w.exp() - x).abs() / x.max(1.0);
            assert!(res <= 1e-12, "x={x} residual={res:e}");
            x *= 1.7;
        }
    }

    #[test]
    fn log_prox_root_at_one() {
        // h(0) = y - alpha - (1 - alpha) = 0 exactly when y = 1
        for &alpha in &[0.05, 0.125, 0.5, 0.95] {
            let g = log_prox_scalar(1.0, alpha, 1e-12, 30).unwrap();
            assert!(g.abs() < 1e-12, "alpha={alpha} g={g}");
        }
    }

    #[test]
    fn log_prox_matches_bisection_oracle() {
        // deep negative asymptote: g ~ y/alpha - 1
        let g = log_prox_scalar(-20.0, 0.5, 1e-12, 30).unwrap();
        let oracle = h_root_bisect(-20.0, 0.5);
        assert!((g - oracle).abs() < 1e-6, "g={g} oracle={oracle}");
        assert!((g - (-41.0)).abs() < 1e-6);

        let g = log_prox_scalar(2.0, 0.5, 1e-12, 30).unwrap();
        let oracle = h_root_bisect(2.0, 0.5);
        assert!((g - oracle).abs() < 1e-9, "g={g} oracle={oracle}");
    }

    #[test]
    fn prox_symmetric_input_is_uniform() {
        for &alpha in &[0.05, 0.5, 1.0] {
            for &c in &[-3.0, 0.0, 7.5] {
                let r = prox_alpha(&[c, c, c], &ProxConfig::with_alpha(alpha)).unwrap();
                for z in &r.z {
                    // the lambda solve stops at |sum z - 1| <= 1e-10
                    assert!((z - 1.0 / 3.0).abs() < 1e-10, "alpha={alpha} c={c}");
                }
            }
        }
    }

    #[test]
    fn prox_alpha_one_is_softmax() {
        let r = prox_alpha(&[1.0, 2.0, 3.0], &ProxConfig::with_alpha(1.0)).unwrap();
        let expect = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        for (zi, ei) in r.z.iter().zip(expect) {
            assert!((zi - ei).abs() < 1e-8);
        }
    }

    #[test]
    fn prox_matches_projected_oracle() {
        let x = [0.3, -0.1, 0.7];
        let r = prox_alpha(&x, &ProxConfig::with_alpha(0.5)).unwrap();
        let oracle = prox_oracle_eg(&x, 0.5);
        for (zi, oi) in r.z.iter().zip(&oracle) {
            assert!((zi - oi).abs() < 1e-6, "z={:?} oracle={:?}", r.z, oracle);
        }
    }

    #[test]
    fn prox_simplex_and_kkt_invariants() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for &alpha in &[0.05, 0.125, 0.5, 0.95] {
            let cfg = ProxConfig::with_alpha(alpha);
            for _ in 0..250 {
                let k = rng.gen_range(2..=64);
                let x: Vec<f64> = (0..k).map(|_| rng.gen_range(-8.0..8.0)).collect();
                let r = prox_alpha(&x, &cfg).unwrap();
                let sum: f64 = r.z.iter().sum();
                assert!((sum - 1.0).abs() < 1e-10, "alpha={alpha} sum={sum}");
                assert!(r.z.iter().all(|&z| z > 0.0));
                assert!(r.kkt_residual(&x, alpha) <= 1e-8);
            }
        }
    }

    #[test]
    fn prox_translation_covariance() {
        let x = [0.4, -1.2, 0.9, 0.0];
        let cfg = ProxConfig::with_alpha(0.3);
        let r0 = prox_alpha(&x, &cfg).unwrap();
        let c = 2.75;
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        let r1 = prox_alpha(&shifted, &cfg).unwrap();
        for (a, b) in r0.z.iter().zip(&r1.z) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!((r1.lambda - (r0.lambda - c)).abs() < 1e-10);
    }

    #[test]
    fn prox_continuity_at_alpha_one() {
        let x = [0.9, -0.3, 0.1, 2.0];
        let near = prox_alpha(&x, &ProxConfig::with_alpha(1.0 - 1e-6)).unwrap();
        let soft = prox_alpha(&x, &ProxConfig::with_alpha(1.0)).unwrap();
        for (a, b) in near.z.iter().zip(&soft.z) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn prox_rejects_bad_alpha() {
        assert!(prox_alpha(&[0.0, 1.0], &ProxConfig::with_alpha(1.5)).is_err());
        assert!(prox_alpha(&[0.0, 1.0], &ProxConfig::with_alpha(0.0)).is_err());
    }

    #[test]
    fn vjp_rows_sum_to_zero() {
        let x = [0.2, -0.5, 1.4];
        let cfg = ProxConfig::with_alpha(0.3);
        let r = prox_alpha(&x, &cfg).unwrap();
        let out = prox_alpha_vjp(&r, &x, &[1.0, 1.0, 1.0], &cfg).unwrap();
        for v in out {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn vjp_permutation_equivariance_on_symmetric_input() {
        let x = [0.7, 0.7, 0.7];
        let cfg = ProxConfig::with_alpha(0.25);
        let r = prox_alpha(&x, &cfg).unwrap();
        let a = prox_alpha_vjp(&r, &x, &[1.0, 0.0, 0.0], &cfg).unwrap();
        let b = prox_alpha_vjp(&r, &x, &[0.0, 1.0, 0.0], &cfg).unwrap();
        // permuting the upstream basis permutes the output
        assert!((a[0] - b[1]).abs() < 1e-13);
        assert!((a[1] - b[0]).abs() < 1e-13);
        assert!((a[2] - b[2]).abs() < 1e-13);
    }

    #[test]
    fn vjp_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        // the difference quotient divides the forward solve's error by the
        // step, so the oracle needs a much tighter solve than production
        let cfg = ProxConfig {
            alpha: 0.3,
            halley_tol: 1e-14,
            newton_tol: 1e-13,
            ..ProxConfig::default()
        };
        for _ in 0..40 {
            let k = rng.gen_range(2..=8);
            let x: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let u: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let r = prox_alpha(&x, &cfg).unwrap();
            let got = prox_alpha_vjp(&r, &x, &u, &cfg).unwrap();
            let eps = 1e-5;
            for j in 0..k {
                let mut xp = x.clone();
                xp[j] += eps;
                let mut xm = x.clone();
                xm[j] -= eps;
                let zp = prox_alpha(&xp, &cfg).unwrap().z;
                let zm = prox_alpha(&xm, &cfg).unwrap().z;
                let fd: f64 = (0..k).map(|i| u[i] * (zp[i] - zm[i]) / (2.0 * eps)).sum();
                let denom = fd.abs().max(1e-3);
                assert!(
                    (got[j] - fd).abs() / denom < 1e-5,
                    "j={j} got={} fd={fd}",
                    got[j]
                );
            }
        }
    }

    #[test]
    fn vjp_rejects_stale_result() {
        let x = [0.2, -0.5, 1.4];
        let cfg = ProxConfig::with_alpha(0.3);
        let r = prox_alpha(&x, &cfg).unwrap();
        let other = [5.0, -2.0, 0.3];
        assert!(prox_alpha_vjp(&r, &other, &[1.0, 0.0, 0.0], &cfg).is_err());
    }
}

/// Newton-evaluation counter for performance diagnosis (test builds only).
#[cfg(feature = "prox-stats")]
pub static PROX_EVALS: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);
#[cfg(feature = "prox-stats")]
pub static PROX_CALLS: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);
