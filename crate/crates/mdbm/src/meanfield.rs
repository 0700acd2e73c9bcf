//! Fixed-point solvers for conditional mean-field inference.
//!
//! The production path is the damped forward-backward iteration
//!
//! ```text
//! q <- prox_f^alpha( (1-alpha) q + alpha (Phi_hh q + Phi_ho x_o + b_h) )
//! ```
//!
//! whose fixed point is the unique mean-field solution when the potential is
//! monotone, plus the matching implicit backward pass. Three baseline update
//! rules are provided for comparison: the undamped parallel softmax step
//! (CCCP), the log-space damped step, and the regularized Frank-Wolfe step.
//!
//! Everything operates on batches: hidden coordinates iterate, observed ones
//! stay zero (their influence enters through the injection term).

use std::time::Instant;

use crate::error::{Error, Result};
use crate::linops::{BlockWeights, GroupLayout, GroupedBatch};
use crate::model::{Mask, MaskedSample, MdbmModel};
use crate::prox::{self, softmax_in_place, ProxConfig};

/// Damping, stopping and acceleration parameters for the fixed-point solves.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SolverConfig {
    pub alpha: f64,
    pub rel_tol: f64,
    pub max_iter: usize,
    /// Anderson window; 0 disables acceleration.
    pub anderson_window: usize,
    /// Halve alpha after three consecutive residual increases.
    pub lipschitz_guard: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self::verification()
    }
}

impl SolverConfig {
    /// Loose settings used inside the training loop.
    pub fn training() -> Self {
        Self {
            alpha: 0.125,
            rel_tol: 0.01,
            max_iter: 50,
            anderson_window: 5,
            lipschitz_guard: false,
        }
    }

    /// Tight settings for test and verification runs.
    pub fn verification() -> Self {
        Self {
            alpha: 0.125,
            rel_tol: 1e-6,
            max_iter: 500,
            anderson_window: 0,
            lipschitz_guard: false,
        }
    }

    pub fn with_tol(mut self, rel_tol: f64) -> Self {
        self.rel_tol = rel_tol;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn prox_config(&self) -> ProxConfig {
        ProxConfig::with_alpha(self.alpha)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rel_tol <= 0.0 {
            return Err(Error::config("rel_tol must be positive"));
        }
        if self.max_iter == 0 {
            return Err(Error::config("max_iter must be at least 1"));
        }
        self.prox_config().validate()
    }
}

/// Per-sample record of one solve. `residuals[t]` is the fixed-point
/// residual `||G(q_t) - q_t|| / ||q_t||` observed at iteration `t`; the
/// solve stops once it reaches `rel_tol`.
#[derive(Debug, Clone)]
pub struct InferenceTrace {
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Constant term of the hidden fixed-point equation: `Phi_ho x_o + b_h`,
/// computed as one potential application on the observed one-hots (hidden
/// coordinates zeroed) plus the bias, restricted to the hidden coordinates.
pub fn input_injection(
    weights: &BlockWeights,
    x: &GroupedBatch,
    masks: &[Mask],
    bias: &[f64],
) -> Result<GroupedBatch> {
    let layout = weights.layout();
    check_masks(layout, x, masks, "input_injection")?;
    if bias.len() != layout.total_len() {
        return Err(Error::layout(format!(
            "input_injection: bias has {} coordinates, layout expects {}",
            bias.len(),
            layout.total_len()
        )));
    }
    let mut padded = x.clone();
    zero_vars(layout, &mut padded, masks, false);
    let mut out = weights.apply_phi(&padded)?;
    for c in 0..layout.total_len() {
        let row = out.row_mut(c);
        for b in row.iter_mut() {
            *b += bias[c];
        }
    }
    // only hidden coordinates are meaningful
    zero_vars(layout, &mut out, masks, true);
    Ok(out)
}

/// Damped parallel mean-field with optional safeguarded Anderson
/// acceleration, from the uniform initializer. Returns the per-sample fixed
/// points (observed coordinates zero) and traces; exhausting `max_iter` is
/// reported through the trace, not an error.
pub fn solve_forward(
    weights: &BlockWeights,
    injection: &GroupedBatch,
    masks: &[Mask],
    config: &SolverConfig,
) -> Result<(GroupedBatch, Vec<InferenceTrace>)> {
    solve_forward_from(weights, injection, masks, config, None)
}

/// As [`solve_forward`] but optionally starting from a caller-supplied
/// feasible point (the fixed point is unique on monotone models, so this
/// only matters for uniqueness experiments and warm starts).
pub fn solve_forward_from(
    weights: &BlockWeights,
    injection: &GroupedBatch,
    masks: &[Mask],
    config: &SolverConfig,
    init: Option<&GroupedBatch>,
) -> Result<(GroupedBatch, Vec<InferenceTrace>)> {
    config.validate()?;
    let layout = weights.layout();
    check_masks(layout, injection, masks, "solve_forward")?;
    let batch = injection.batch();
    let dim = layout.total_len();

    let mut q = match init {
        Some(start) => {
            let mut q = start.clone();
            zero_vars(layout, &mut q, masks, true);
            q
        }
        None => {
            let mut q = GroupedBatch::zeros(dim, batch);
            init_uniform(layout, &mut q, masks);
            q
        }
    };

    let mut alpha: Vec<f64> = vec![config.alpha; batch];
    let mut active: Vec<bool> = masks.iter().map(|m| m.hidden_count() > 0).collect();
    let mut residual_up_count = vec![0usize; batch];
    let mut traces: Vec<InferenceTrace> = (0..batch)
        .map(|b| InferenceTrace {
            residuals: Vec::new(),
            iterations: 0,
            converged: !active[b],
        })
        .collect();

    let mut anderson = if config.anderson_window >= 2 {
        Some(AndersonState::new(config.anderson_window))
    } else {
        None
    };
    let prox_cfg = config.prox_config();
    // warm-started multipliers make the evaluated map history-dependent at
    // the inner Newton tolerance (~1e-10), so tight verification solves
    // run cold
    let mut prox_scratch = if config.rel_tol >= 1e-8 {
        Some(ProxScratch::new(layout, batch))
    } else {
        None
    };

    for _iter in 0..config.max_iter {
        if active.iter().all(|a| !a) {
            break;
        }
        // g = G(q): one damped prox step from the current iterate
        let phi_q = weights.apply_phi(&q)?;
        let mut pre = GroupedBatch::zeros(dim, batch);
        for c in 0..dim {
            let (qr, pr, ir) = (q.row(c), phi_q.row(c), injection.row(c));
            let dst = pre.row_mut(c);
            for b in 0..batch {
                dst[b] = (1.0 - alpha[b]) * qr[b] + alpha[b] * (pr[b] + ir[b]);
            }
        }
        let mut g = q.clone();
        prox_vars(
            layout,
            &pre,
            masks,
            &active,
            &alpha,
            &prox_cfg,
            &mut g,
            prox_scratch.as_mut(),
        )?;

        // fixed-point residual per sample over hidden coordinates
        for b in 0..batch {
            if !active[b] {
                continue;
            }
            let (num, den) = diff_norms(&g, &q, b);
            let res = num / den.max(1e-300);
            let t = &mut traces[b];
            if let Some(&last) = t.residuals.last() {
                if res > last {
                    residual_up_count[b] += 1;
                    if config.lipschitz_guard && residual_up_count[b] >= 3 {
                        alpha[b] *= 0.5;
                        residual_up_count[b] = 0;
                    }
                } else {
                    residual_up_count[b] = 0;
                }
            }
            t.residuals.push(res);
            t.iterations += 1;
            if res <= config.rel_tol {
                t.converged = true;
            }
        }

        // next iterate: plain step, or safeguarded Anderson candidate
        let mut next = g.clone();
        if let Some(ref mut aa) = anderson {
            aa.push(&q, &g);
            aa.mix(&g, &q, &active, &mut next);
        }
        for b in 0..batch {
            if active[b] {
                if traces[b].converged {
                    // freeze at the map output so the returned point
                    // satisfies the reported residual
                    copy_column(&g, &mut q, b);
                    active[b] = false;
                } else {
                    copy_column(&next, &mut q, b);
                }
            }
        }
    }
    Ok((q, traces))
}

/// Result of the implicit backward solve.
#[derive(Debug, Clone)]
pub struct BackwardResult {
    /// Fixed point of `u = u dG/dq + upstream`.
    pub u: GroupedBatch,
    /// `u` pushed through the prox Jacobian (`D u`), the vector the
    /// parameter gradients contract against.
    pub dprox_u: GroupedBatch,
    pub traces: Vec<InferenceTrace>,
}

/// Implicit backward pass: solve `u = u (dG/dq*) + upstream` by damped
/// fixed-point iteration, where `dG/dq* = D ((1-alpha) I + alpha Phi)` and
/// `D` is the prox Jacobian at the converged pre-activation. Non-convergence
/// is an error: gradients must not be silently wrong.
pub fn solve_backward(
    weights: &BlockWeights,
    q_star: &GroupedBatch,
    injection: &GroupedBatch,
    masks: &[Mask],
    upstream: &GroupedBatch,
    config: &SolverConfig,
) -> Result<BackwardResult> {
    config.validate()?;
    let layout = weights.layout();
    check_masks(layout, q_star, masks, "solve_backward")?;
    let batch = q_star.batch();
    let dim = layout.total_len();
    let alpha = config.alpha;

    // linearize the prox at s* = (1-alpha) q* + alpha (Phi q* + injection):
    // each grouped prox Jacobian is diag(d) - d d^T / sum(d) with
    // d_i = z_i / (alpha + (1-alpha) z_i)
    let phi_q = weights.apply_phi(q_star)?;
    let mut d = GroupedBatch::zeros(dim, batch);
    let prox_cfg = config.prox_config();
    let all_active = vec![true; batch];
    {
        let mut pre = GroupedBatch::zeros(dim, batch);
        for c in 0..dim {
            let (qr, pr, ir) = (q_star.row(c), phi_q.row(c), injection.row(c));
            let dst = pre.row_mut(c);
            for b in 0..batch {
                dst[b] = (1.0 - alpha) * qr[b] + alpha * (pr[b] + ir[b]);
            }
        }
        let mut z = GroupedBatch::zeros(dim, batch);
        prox_vars(
            layout,
            &pre,
            masks,
            &all_active,
            &vec![alpha; batch],
            &prox_cfg,
            &mut z,
            None,
        )?;
        for c in 0..dim {
            let (zr, dr) = (z.row(c), d.row_mut(c));
            for b in 0..batch {
                dr[b] = zr[b] / (alpha + (1.0 - alpha) * zr[b]);
            }
        }
    }

    let apply_dprox = |u: &GroupedBatch, out: &mut GroupedBatch| {
        layout.for_each_var(|v, layer, coord0, stride| {
            let k = layout.layers()[layer].cardinality();
            for b in 0..batch {
                if masks[b].is_observed(v) {
                    for j in 0..k {
                        out.row_mut(coord0 + j * stride)[b] = 0.0;
                    }
                    continue;
                }
                let mut dsum = 0.0;
                let mut du = 0.0;
                for j in 0..k {
                    let c = coord0 + j * stride;
                    let dv = d.row(c)[b];
                    dsum += dv;
                    du += dv * u.row(c)[b];
                }
                let mean = if dsum > 0.0 { du / dsum } else { 0.0 };
                for j in 0..k {
                    let c = coord0 + j * stride;
                    let dv = d.row(c)[b];
                    out.row_mut(c)[b] = dv * (u.row(c)[b] - mean);
                }
            }
        });
    };

    let mut u = upstream.clone();
    zero_vars(layout, &mut u, masks, true);
    let mut v = GroupedBatch::zeros(dim, batch);
    let mut traces: Vec<InferenceTrace> = (0..batch)
        .map(|_| InferenceTrace {
            residuals: Vec::new(),
            iterations: 0,
            converged: false,
        })
        .collect();
    let mut converged = vec![false; batch];
    // the backward map is affine, which Anderson accelerates well
    let mut anderson = if config.anderson_window >= 2 {
        Some(AndersonState::new(config.anderson_window))
    } else {
        None
    };
    let active_all = vec![true; batch];
    for _iter in 0..config.max_iter {
        apply_dprox(&u, &mut v);
        let phi_v = weights.apply_phi(&v)?;
        // u_new = upstream + (1-alpha) v + alpha Phi v on hidden coords
        let mut u_new = GroupedBatch::zeros(dim, batch);
        for c in 0..dim {
            let (ur, vr, pr) = (upstream.row(c), v.row(c), phi_v.row(c));
            let dst = u_new.row_mut(c);
            for b in 0..batch {
                dst[b] = ur[b] + (1.0 - alpha) * vr[b] + alpha * pr[b];
            }
        }
        zero_vars(layout, &mut u_new, masks, true);
        let mut all = true;
        for b in 0..batch {
            if converged[b] {
                continue;
            }
            let (num, den) = diff_norms(&u_new, &u, b);
            let res = num / den.max(1e-12);
            traces[b].residuals.push(res);
            traces[b].iterations += 1;
            if res <= config.rel_tol {
                converged[b] = true;
                traces[b].converged = true;
            } else {
                all = false;
            }
        }
        if all {
            u = u_new;
            break;
        }
        if let Some(ref mut aa) = anderson {
            aa.push(&u, &u_new);
            let mut next = u_new.clone();
            aa.mix_unconstrained(&u_new, &u, &active_all, &mut next);
            u = next;
        } else {
            u = u_new;
        }
    }
    if let Some(b) = converged.iter().position(|c| !c) {
        return Err(Error::NoConvergence {
            context: format!("backward fixed point (sample {b})"),
            residual: *traces[b].residuals.last().unwrap_or(&f64::NAN),
            iterations: traces[b].iterations,
        });
    }
    apply_dprox(&u, &mut v);
    Ok(BackwardResult {
        u,
        dprox_u: v,
        traces,
    })
}

/// One undamped parallel softmax update (the fast concave-convex step).
pub fn step_cccp(
    weights: &BlockWeights,
    q: &GroupedBatch,
    masks: &[Mask],
    injection: &GroupedBatch,
) -> Result<GroupedBatch> {
    let layout = weights.layout();
    let phi_q = weights.apply_phi(q)?;
    let mut out = q.clone();
    softmax_vars(layout, &phi_q, Some(injection), masks, &mut out);
    Ok(out)
}

/// One log-space damped update
/// `q <- softmax((1-alpha) log q + alpha (Phi q + injection))`.
pub fn step_baque(
    weights: &BlockWeights,
    q: &GroupedBatch,
    masks: &[Mask],
    injection: &GroupedBatch,
    alpha: f64,
) -> Result<GroupedBatch> {
    let layout = weights.layout();
    let batch = q.batch();
    let phi_q = weights.apply_phi(q)?;
    let mut pre = GroupedBatch::zeros(layout.total_len(), batch);
    let mut bad = None;
    layout.for_each_var(|v, layer, coord0, stride| {
        let k = layout.layers()[layer].cardinality();
        for b in 0..batch {
            if masks[b].is_observed(v) {
                continue;
            }
            for j in 0..k {
                let c = coord0 + j * stride;
                let qv = q.row(c)[b];
                if qv <= 0.0 {
                    bad = Some(v);
                    return;
                }
                pre.row_mut(c)[b] =
                    (1.0 - alpha) * qv.ln() + alpha * (phi_q.row(c)[b] + injection.row(c)[b]);
            }
        }
    });
    if let Some(v) = bad {
        return Err(Error::domain(format!(
            "log-damped step: nonpositive marginal at variable {v}; clamp the initializer"
        )));
    }
    let mut out = q.clone();
    softmax_vars(layout, &pre, None, masks, &mut out);
    Ok(out)
}

/// One regularized Frank-Wolfe update
/// `q <- (1-alpha) q + alpha softmax((Phi q + injection)/fw_lambda)`.
pub fn step_frank_wolfe(
    weights: &BlockWeights,
    q: &GroupedBatch,
    masks: &[Mask],
    injection: &GroupedBatch,
    alpha: f64,
    fw_lambda: f64,
) -> Result<GroupedBatch> {
    if fw_lambda <= 0.0 {
        return Err(Error::config("frank-wolfe lambda must be positive"));
    }
    let layout = weights.layout();
    let batch = q.batch();
    let phi_q = weights.apply_phi(q)?;
    let mut pre = GroupedBatch::zeros(layout.total_len(), batch);
    for c in 0..layout.total_len() {
        let (pr, ir) = (phi_q.row(c), injection.row(c));
        let dst = pre.row_mut(c);
        for b in 0..batch {
            dst[b] = (pr[b] + ir[b]) / fw_lambda;
        }
    }
    let mut soft = q.clone();
    softmax_vars(layout, &pre, None, masks, &mut soft);
    let mut out = q.clone();
    layout.for_each_var(|v, layer, coord0, stride| {
        let k = layout.layers()[layer].cardinality();
        for b in 0..batch {
            if masks[b].is_observed(v) {
                continue;
            }
            for j in 0..k {
                let c = coord0 + j * stride;
                out.row_mut(c)[b] = (1.0 - alpha) * q.row(c)[b] + alpha * soft.row(c)[b];
            }
        }
    });
    Ok(out)
}

/// Inference rules compared by [`compare_inference`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InferenceMethod {
    /// Damped proximal iteration (this crate's solver).
    Ours,
    /// Log-space damped softmax iteration.
    Baque,
    /// Undamped parallel softmax iteration.
    Cccp,
    /// Regularized Frank-Wolfe with the given regularizer.
    FrankWolfe(f64),
}

impl InferenceMethod {
    pub fn name(&self) -> &'static str {
        match self {
            InferenceMethod::Ours => "ours",
            InferenceMethod::Baque => "baque",
            InferenceMethod::Cccp => "cccp",
            InferenceMethod::FrankWolfe(_) => "frank_wolfe",
        }
    }
}

/// One row of the comparison table.
#[derive(Debug, Clone)]
pub struct MethodMetrics {
    pub method: String,
    pub iterations: usize,
    pub final_residual: f64,
    pub tv_distance: Option<f64>,
    pub wall_time_ms: f64,
}

impl MethodMetrics {
    pub fn csv_header() -> &'static str {
        "method,iterations,final_residual,tv_distance,wall_time_ms"
    }

    pub fn csv_row(&self, with_time: bool) -> String {
        let tv = self
            .tv_distance
            .map(|t| format!("{t:.6e}"))
            .unwrap_or_default();
        let time = if with_time {
            format!("{:.3}", self.wall_time_ms)
        } else {
            String::new()
        };
        format!(
            "{},{},{:.6e},{},{}",
            self.method, self.iterations, self.final_residual, tv, time
        )
    }
}

/// Run each method on the same conditioned model until its own inter-iterate
/// residual reaches `tol` or `budget` steps elapse; then score the returned
/// point by the one-more-softmax-step protocol, and measure the TV distance
/// of hidden marginals to the sequential coordinate-ascent oracle when the
/// model is small enough to materialize.
pub fn compare_inference(
    model: &MdbmModel,
    samples: &[MaskedSample],
    methods: &[InferenceMethod],
    budget: usize,
    tol: f64,
) -> Result<Vec<MethodMetrics>> {
    let weights = &model.weights;
    let layout = weights.layout();
    let masks: Vec<Mask> = samples.iter().map(|s| s.mask.clone()).collect();
    let x = GroupedBatch::pack(&samples.iter().map(|s| s.x.clone()).collect::<Vec<_>>());
    let injection = input_injection(weights, &x, &masks, &model.bias)?;
    let batch = samples.len();
    let dim = layout.total_len();

    // oracle marginals for TV columns, when feasible
    let oracle: Option<Vec<Vec<f64>>> = if dim <= crate::linops::MATERIALIZE_CAP {
        let mut all = Vec::with_capacity(batch);
        let mut ok = true;
        for s in samples {
            match model.coordinate_ascent_meanfield(s, 1e-10, 20_000) {
                Ok((q, _, true)) => all.push(q),
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            Some(all)
        } else {
            eprintln!("warning: coordinate-ascent oracle unavailable; omitting TV columns");
            None
        }
    } else {
        eprintln!("warning: dimension {dim} above oracle cap; omitting TV columns");
        None
    };

    let mut out = Vec::new();
    for method in methods {
        let start = Instant::now();
        let mut q = GroupedBatch::zeros(dim, batch);
        init_uniform(layout, &mut q, &masks);
        let mut iterations = 0usize;
        let mut done = vec![false; batch];
        match method {
            InferenceMethod::Ours => {
                let cfg = SolverConfig {
                    alpha: 0.125,
                    rel_tol: tol,
                    max_iter: budget,
                    anderson_window: 0,
                    lipschitz_guard: false,
                };
                let (solved, traces) = solve_forward(weights, &injection, &masks, &cfg)?;
                q = solved;
                iterations = traces.iter().map(|t| t.iterations).max().unwrap_or(0);
            }
            _ => {
                for it in 0..budget {
                    let next = match method {
                        InferenceMethod::Baque => {
                            step_baque(weights, &q, &masks, &injection, 0.125)?
                        }
                        InferenceMethod::Cccp => step_cccp(weights, &q, &masks, &injection)?,
                        InferenceMethod::FrankWolfe(lam) => {
                            step_frank_wolfe(weights, &q, &masks, &injection, 0.125, *lam)?
                        }
                        InferenceMethod::Ours => unreachable!(),
                    };
                    let mut all_done = true;
                    for b in 0..batch {
                        if done[b] {
                            continue;
                        }
                        let (num, den) = diff_norms(&next, &q, b);
                        let res = num / den.max(1e-300);
                        if res <= tol {
                            done[b] = true;
                        } else {
                            all_done = false;
                        }
                    }
                    q = next;
                    iterations = it + 1;
                    if all_done {
                        break;
                    }
                }
            }
        }
        // Table-3 protocol: run one more undamped softmax step and record
        // the relative change
        let extra = step_cccp(weights, &q, &masks, &injection)?;
        let mut worst = 0.0f64;
        for b in 0..batch {
            let (num, den) = diff_norms(&extra, &q, b);
            worst = worst.max(num / den.max(1e-300));
        }
        let tv = oracle.as_ref().map(|oracle_all| {
            let mut acc = 0.0;
            for (b, oq) in oracle_all.iter().enumerate() {
                acc += tv_distance_hidden(layout, &q.column(b), oq, &samples[b].mask);
            }
            acc / batch as f64
        });
        out.push(MethodMetrics {
            method: method.name().to_string(),
            iterations,
            final_residual: worst,
            tv_distance: tv,
            wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(out)
}

/// Mean over hidden variables of the per-variable total-variation distance
/// `0.5 ||q_v - p_v||_1`.
pub fn tv_distance_hidden(layout: &GroupLayout, q: &[f64], p: &[f64], mask: &Mask) -> f64 {
    let mut acc = 0.0;
    let mut count = 0usize;
    layout.for_each_var(|v, layer, coord0, stride| {
        if mask.is_observed(v) {
            return;
        }
        let k = layout.layers()[layer].cardinality();
        let mut l1 = 0.0;
        for j in 0..k {
            let c = coord0 + j * stride;
            l1 += (q[c] - p[c]).abs();
        }
        acc += 0.5 * l1;
        count += 1;
    });
    if count == 0 {
        0.0
    } else {
        acc / count as f64
    }
}

// ---- shared helpers ----

fn check_masks(layout: &GroupLayout, x: &GroupedBatch, masks: &[Mask], what: &str) -> Result<()> {
    if x.dim() != layout.total_len() {
        return Err(Error::layout(format!(
            "{what}: vector has {} coordinates, layout expects {}",
            x.dim(),
            layout.total_len()
        )));
    }
    if masks.len() != x.batch() {
        return Err(Error::layout(format!(
            "{what}: {} masks for a batch of {}",
            masks.len(),
            x.batch()
        )));
    }
    for (b, m) in masks.iter().enumerate() {
        if m.n_vars() != layout.n_vars() {
            return Err(Error::layout(format!(
                "{what}: mask {b} covers {} variables, layout has {}",
                m.n_vars(),
                layout.n_vars()
            )));
        }
    }
    Ok(())
}

/// Zero the observed (`hidden_side = true`) or hidden (`false`) variables
/// of each sample.
fn zero_vars(layout: &GroupLayout, x: &mut GroupedBatch, masks: &[Mask], hidden_side: bool) {
    let batch = x.batch();
    layout.for_each_var(|v, layer, coord0, stride| {
        let k = layout.layers()[layer].cardinality();
        for b in 0..batch {
            let observed = masks[b].is_observed(v);
            if observed == hidden_side {
                for j in 0..k {
                    x.row_mut(coord0 + j * stride)[b] = 0.0;
                }
            }
        }
    });
}

/// Uniform initialization on hidden variables, zero elsewhere.
pub(crate) fn init_uniform(layout: &GroupLayout, q: &mut GroupedBatch, masks: &[Mask]) {
    let batch = q.batch();
    layout.for_each_var(|v, layer, coord0, stride| {
        let k = layout.layers()[layer].cardinality();
        let u = 1.0 / k as f64;
        for b in 0..batch {
            let val = if masks[b].is_observed(v) { 0.0 } else { u };
            for j in 0..k {
                q.row_mut(coord0 + j * stride)[b] = val;
            }
        }
    });
}

/// Per-(variable, sample) multipliers and log-marginals carried between
/// solver iterations so consecutive prox solves start warm.
struct ProxScratch {
    lambda: Vec<f64>,
    g: GroupedBatch,
    warm: Vec<bool>,
}

impl ProxScratch {
    fn new(layout: &GroupLayout, batch: usize) -> Self {
        Self {
            lambda: vec![0.0; layout.n_vars() * batch],
            g: GroupedBatch::zeros(layout.total_len(), batch),
            warm: vec![false; layout.n_vars() * batch],
        }
    }
}

/// Grouped prox applied to the hidden variables of active samples; observed
/// variables keep whatever `out` already holds. Stack buffers and the
/// allocation-free prox core keep this hot path cheap.
fn prox_vars(
    layout: &GroupLayout,
    pre: &GroupedBatch,
    masks: &[Mask],
    active: &[bool],
    alpha: &[f64],
    base_cfg: &ProxConfig,
    out: &mut GroupedBatch,
    mut scratch: Option<&mut ProxScratch>,
) -> Result<()> {
    let batch = pre.batch();
    let cfgs: Vec<ProxConfig> = alpha
        .iter()
        .map(|&a| ProxConfig {
            alpha: a,
            ..base_cfg.clone()
        })
        .collect();
    for cfg in &cfgs {
        cfg.validate()?;
    }
    let mut xbuf = [0.0f64; 64];
    let mut zbuf = [0.0f64; 64];
    let mut gbuf = [0.0f64; 64];
    let mut failure: Option<Error> = None;
    layout.for_each_var(|v, layer, coord0, stride| {
        if failure.is_some() {
            return;
        }
        let k = layout.layers()[layer].cardinality();
        debug_assert!(k <= 64, "grouped cardinality above the prox buffer size");
        for b in 0..batch {
            if !active[b] || masks[b].is_observed(v) {
                continue;
            }
            if k == 1 {
                out.row_mut(coord0)[b] = 1.0;
                continue;
            }
            for j in 0..k {
                xbuf[j] = pre.row(coord0 + j * stride)[b];
            }
            if cfgs[b].alpha == 1.0 {
                softmax_in_place(&mut xbuf[..k]);
                for j in 0..k {
                    out.row_mut(coord0 + j * stride)[b] = xbuf[j];
                }
                continue;
            }
            let warm = match scratch.as_mut() {
                Some(sc) if sc.warm[v * batch + b] => {
                    for j in 0..k {
                        gbuf[j] = sc.g.row(coord0 + j * stride)[b];
                    }
                    Some(sc.lambda[v * batch + b])
                }
                _ => None,
            };
            match prox::prox_alpha_into(&xbuf[..k], &cfgs[b], &mut zbuf[..k], &mut gbuf[..k], warm)
            {
                Ok(lam) => {
                    for j in 0..k {
                        out.row_mut(coord0 + j * stride)[b] = zbuf[j];
                    }
                    if let Some(sc) = scratch.as_mut() {
                        sc.lambda[v * batch + b] = lam;
                        sc.warm[v * batch + b] = true;
                        for j in 0..k {
                            sc.g.row_mut(coord0 + j * stride)[b] = gbuf[j];
                        }
                    }
                }
                Err(e) => {
                    failure = Some(Error::domain(format!(
                        "prox failed at variable {v} (sample {b}): {e}"
                    )));
                    return;
                }
            }
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Softmax over each hidden variable of `pre (+ injection)`.
fn softmax_vars(
    layout: &GroupLayout,
    pre: &GroupedBatch,
    injection: Option<&GroupedBatch>,
    masks: &[Mask],
    out: &mut GroupedBatch,
) {
    let batch = pre.batch();
    let mut buf = vec![0.0f64; 64];
    layout.for_each_var(|v, layer, coord0, stride| {
        let k = layout.layers()[layer].cardinality();
        for b in 0..batch {
            if masks[b].is_observed(v) {
                continue;
            }
            for j in 0..k {
                let c = coord0 + j * stride;
                buf[j] = pre.row(c)[b] + injection.map_or(0.0, |i| i.row(c)[b]);
            }
            softmax_in_place(&mut buf[..k]);
            for j in 0..k {
                out.row_mut(coord0 + j * stride)[b] = buf[j];
            }
        }
    });
}

/// `(||a_b - b_b||_2, ||b_b||_2)` over one sample's coordinates.
fn diff_norms(a: &GroupedBatch, b: &GroupedBatch, sample: usize) -> (f64, f64) {
    let batch = a.batch();
    let mut num = 0.0;
    let mut den = 0.0;
    let mut c = sample;
    while c < a.data.len() {
        let d = a.data[c] - b.data[c];
        num += d * d;
        den += b.data[c] * b.data[c];
        c += batch;
    }
    (num.sqrt(), den.sqrt())
}

fn copy_column(src: &GroupedBatch, dst: &mut GroupedBatch, b: usize) {
    let batch = src.batch();
    let mut c = b;
    while c < src.data.len() {
        dst.data[c] = src.data[c];
        c += batch;
    }
}

/// Safeguarded type-II Anderson acceleration over the iterate history.
struct AndersonState {
    window: usize,
    qs: Vec<GroupedBatch>,
    gs: Vec<GroupedBatch>,
}

impl AndersonState {
    fn new(window: usize) -> Self {
        Self {
            window,
            qs: Vec::new(),
            gs: Vec::new(),
        }
    }

    fn push(&mut self, q: &GroupedBatch, g: &GroupedBatch) {
        if self.qs.len() == self.window {
            self.qs.remove(0);
            self.gs.remove(0);
        }
        self.qs.push(q.clone());
        self.gs.push(g.clone());
    }

    /// Candidate `sum_i theta_i g_i` with `theta` minimizing the mixed
    /// residual; rejected per sample in favor of the plain step when the
    /// candidate is not finite, steps further than the plain step, or
    /// leaves the nonnegative orthant.
    fn mix(&self, g: &GroupedBatch, q: &GroupedBatch, active: &[bool], next: &mut GroupedBatch) {
        self.mix_impl(g, q, active, next, true)
    }

    /// As [`Self::mix`] without the orthant guard (for sign-free iterates
    /// such as the backward pass).
    fn mix_unconstrained(
        &self,
        g: &GroupedBatch,
        q: &GroupedBatch,
        active: &[bool],
        next: &mut GroupedBatch,
    ) {
        self.mix_impl(g, q, active, next, false)
    }

    fn mix_impl(
        &self,
        g: &GroupedBatch,
        q: &GroupedBatch,
        active: &[bool],
        next: &mut GroupedBatch,
        require_nonneg: bool,
    ) {
        let m = self.qs.len();
        if m < 2 {
            return;
        }
        let batch = q.batch();
        let dim = q.dim();
        for b in 0..batch {
            if !active[b] {
                continue;
            }
            let f = |i: usize, c: usize| {
                self.gs[i].data[c * batch + b] - self.qs[i].data[c * batch + b]
            };
            // minimize || f_last + sum_i gamma_i (f_i - f_last) || over the
            // difference basis via normal equations
            let last = m - 1;
            let nb = m - 1;
            let mut ata = vec![0.0f64; nb * nb];
            let mut atb = vec![0.0f64; nb];
            for c in 0..dim {
                let flast = f(last, c);
                for i in 0..nb {
                    let di = f(i, c) - flast;
                    atb[i] -= di * flast;
                    for j in 0..=i {
                        ata[i * nb + j] += di * (f(j, c) - flast);
                    }
                }
            }
            for i in 0..nb {
                for j in (i + 1)..nb {
                    ata[i * nb + j] = ata[j * nb + i];
                }
                ata[i * nb + i] += 1e-10;
            }
            let gamma = match solve_small(&mut ata, &mut atb, nb) {
                Some(sol) => sol,
                None => continue,
            };
            let mut theta = vec![0.0f64; m];
            let mut sum = 0.0;
            for i in 0..nb {
                theta[i] = gamma[i];
                sum += gamma[i];
            }
            theta[last] = 1.0 - sum;

            let mut ok = true;
            let mut step_sq = 0.0;
            let mut plain_sq = 0.0;
            let mut cand = vec![0.0f64; dim];
            for c in 0..dim {
                let mut val = 0.0;
                for i in 0..m {
                    val += theta[i] * self.gs[i].data[c * batch + b];
                }
                if !val.is_finite() || (require_nonneg && val < 0.0) {
                    ok = false;
                    break;
                }
                cand[c] = val;
                let qc = q.data[c * batch + b];
                let dc = val - qc;
                step_sq += dc * dc;
                let dp = g.data[c * batch + b] - qc;
                plain_sq += dp * dp;
            }
            if !ok || (require_nonneg && step_sq > plain_sq) {
                continue;
            }
            for c in 0..dim {
                next.data[c * batch + b] = cand[c];
            }
        }
    }
}

/// Gaussian elimination with partial pivoting for the small Anderson system.
fn solve_small(a: &mut [f64], b: &mut [f64], n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let mut piv = col;
        for r in (col + 1)..n {
            if a[r * n + col].abs() > a[piv * n + col].abs() {
                piv = r;
            }
        }
        if a[piv * n + col] == 0.0 {
            return None;
        }
        if piv != col {
            for c in 0..n {
                a.swap(col * n + c, piv * n + c);
            }
            b.swap(col, piv);
        }
        let d = a[col * n + col];
        for r in (col + 1)..n {
            let factor = a[r * n + col] / d;
            if factor == 0.0 {
                continue;
            }
            for c in col..n {
                a[r * n + c] -= factor * a[col * n + c];
            }
            b[r] -= factor * b[col];
        }
    }
    let mut x = vec![0.0f64; n];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for c in (col + 1)..n {
            acc -= a[col * n + c] * x[c];
        }
        x[col] = acc / a[col * n + col];
    }
    Some(x)
}
