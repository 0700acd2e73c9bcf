//! Marginal-based training: weighted cross-entropy losses on the mean-field
//! fixed point, implicit parameter gradients, and Adam.
//!
//! The per-batch flow is: solve the forward fixed point with the hidden
//! values withheld, score temperature-scaled logits against the truth,
//! solve the implicit backward fixed point, contract it against the
//! parameterization, and take one optimizer step followed by spectral
//! re-normalization.

use crate::error::{Error, Result};
use crate::linops::{GroupedBatch, PhiGrads};
use crate::meanfield::{self, SolverConfig};
use crate::model::{Mask, MaskedSample, MdbmModel};
use crate::prox::softmax_in_place;

/// Loss weighting: `loss = (1-w) * pixel + w * label`, with per-bin pixel
/// class weights `(1-beta)/(1-beta^n_i)`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    pub class_weight_beta: f64,
    pub task_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            class_weight_beta: 0.9999,
            task_weight: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.class_weight_beta) {
            return Err(Error::config("class_weight_beta must lie in [0,1)"));
        }
        if !(0.0..=1.0).contains(&self.task_weight) {
            return Err(Error::config("task_weight must lie in [0,1]"));
        }
        Ok(())
    }
}

/// Effective-number class weights `w_i = (1-beta)/(1-beta^{n_i})`.
pub fn class_weights(counts: &[usize], beta: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::config(format!("beta must lie in [0,1), got {beta}")));
    }
    counts
        .iter()
        .map(|&n| {
            if n == 0 {
                return Err(Error::domain(
                    "class_weights: zero count leaves the weight undefined",
                ));
            }
            if beta == 0.0 {
                return Ok(1.0);
            }
            Ok((1.0 - beta) / (1.0 - beta.powi(n as i32)))
        })
        .collect()
}

/// Loss terms of one batch, plus everything the gradient assembly needs.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub loss: f64,
    pub pixel_loss: f64,
    pub label_loss: f64,
    /// `d loss / d q*` for the implicit backward solve.
    pub upstream: GroupedBatch,
    /// `d loss / d z` at the temperature-scaled logits (full-length,
    /// nonzero on hidden output coordinates), the direct path into the
    /// parameters.
    pub dlogit: GroupedBatch,
    /// Per-variable gradient of the log-temperatures.
    pub dlog_temp: Vec<f64>,
    /// Correctly classified samples (when the model has a label).
    pub correct: usize,
}

/// Cross-entropy of the temperature-scaled pre-activations against the true
/// one-hots: pixel terms are class-weighted and averaged over hidden pixels,
/// the label term reads the label variable. Also returns `d loss/d q*`,
/// which flows through `z = Phi q~ + b`.
pub fn marginal_loss(
    model: &MdbmModel,
    q_star: &GroupedBatch,
    samples: &[MaskedSample],
    pixel_weights: &[f64],
    config: &LossConfig,
) -> Result<LossTerms> {
    config.validate()?;
    let layout = model.weights.layout();
    let batch = q_star.batch();
    if batch != samples.len() {
        return Err(Error::layout(format!(
            "marginal_loss: {} samples for a batch of {}",
            samples.len(),
            batch
        )));
    }
    let pl = model.arch.pixel_layer;
    let bins = layout.layers()[pl].cardinality();
    if pixel_weights.len() != bins {
        return Err(Error::layout(format!(
            "marginal_loss: {} pixel class weights for cardinality {}",
            pixel_weights.len(),
            bins
        )));
    }
    let label_var = model.label_var();
    let w = config.task_weight;

    // pre-activations z = Phi q~ + b with q~ = q* on hidden, x_o on observed
    let mut q_tilde = q_star.clone();
    for (b, s) in samples.iter().enumerate() {
        for v in 0..model.n_vars() {
            if s.mask.is_observed(v) {
                for &c in &layout.var_coords(v) {
                    q_tilde.row_mut(c)[b] = s.x[c];
                }
            }
        }
    }
    let phi_q = model.weights.apply_phi(&q_tilde)?;
    let mut z = phi_q;
    for c in 0..layout.total_len() {
        let row = z.row_mut(c);
        for val in row.iter_mut() {
            *val += model.bias[c];
        }
    }

    let mut pixel_loss = 0.0;
    let mut label_loss = 0.0;
    let mut dlogit = GroupedBatch::zeros(layout.total_len(), batch);
    let mut dlog_temp = vec![0.0; model.n_vars()];
    let mut correct = 0usize;
    let mut any_hidden = false;

    let pixel_vars: Vec<usize> = (layout.var_base(pl)
        ..layout.var_base(pl) + layout.layers()[pl].n_vars())
        .collect();
    let mut logits = vec![0.0f64; 64];
    // first pass: count hidden pixels per sample for the averaging
    let hidden_pixel_counts: Vec<usize> = samples
        .iter()
        .map(|s| pixel_vars.iter().filter(|&&v| !s.mask.is_observed(v)).count())
        .collect();

    for (b, s) in samples.iter().enumerate() {
        let mut any = false;
        // pixel reconstruction term
        let denom = hidden_pixel_counts[b].max(1) as f64;
        for &v in &pixel_vars {
            if s.mask.is_observed(v) {
                continue;
            }
            any = true;
            let coords = layout.var_coords(v);
            let tau = model.log_temp[v].exp();
            for (j, &c) in coords.iter().enumerate() {
                logits[j] = tau * z.row(c)[b];
            }
            softmax_in_place(&mut logits[..bins]);
            let true_bin = coords
                .iter()
                .position(|&c| s.x[c] == 1.0)
                .ok_or_else(|| Error::domain(format!("sample {b}: pixel {v} has no one-hot")))?;
            let cw = pixel_weights[true_bin];
            let p_true = logits[true_bin].max(1e-300);
            let coef = (1.0 - w) * cw / denom / batch as f64;
            pixel_loss += -(p_true.ln()) * cw / denom / batch as f64;
            let mut tgrad = 0.0;
            for (j, &c) in coords.iter().enumerate() {
                let diff = logits[j] - if j == true_bin { 1.0 } else { 0.0 };
                dlogit.row_mut(c)[b] += coef * tau * diff;
                tgrad += diff * z.row(c)[b];
            }
            // d/d log tau = tau * d/d tau
            dlog_temp[v] += coef * tau * tgrad;
        }
        if any {
            any_hidden = true;
        }
        // label classification term
        if let Some(lv) = label_var {
            if !s.mask.is_observed(lv) {
                any_hidden = true;
                let coords = layout.var_coords(lv);
                let kl = coords.len();
                let tau = model.log_temp[lv].exp();
                for (j, &c) in coords.iter().enumerate() {
                    logits[j] = tau * z.row(c)[b];
                }
                softmax_in_place(&mut logits[..kl]);
                let true_cls = coords.iter().position(|&c| s.x[c] == 1.0).ok_or_else(|| {
                    Error::domain(format!("sample {b}: label variable has no one-hot"))
                })?;
                let argmax = (0..kl)
                    .max_by(|&a, &bb| logits[a].total_cmp(&logits[bb]))
                    .unwrap();
                if argmax == true_cls {
                    correct += 1;
                }
                let p_true = logits[true_cls].max(1e-300);
                label_loss += -(p_true.ln()) / batch as f64;
                let coef = w / batch as f64;
                let mut tgrad = 0.0;
                for (j, &c) in coords.iter().enumerate() {
                    let diff = logits[j] - if j == true_cls { 1.0 } else { 0.0 };
                    dlogit.row_mut(c)[b] += coef * tau * diff;
                    tgrad += diff * z.row(c)[b];
                }
                dlog_temp[lv] += coef * tau * tgrad;
            }
        }
    }
    if !any_hidden {
        return Err(Error::domain("marginal_loss: no hidden output variables"));
    }

    // upstream = d loss / d q* = Phi_hh (d loss / d z) (hidden restriction)
    let phi_d = model.weights.apply_phi(&dlogit)?;
    let mut upstream = phi_d;
    for (b, s) in samples.iter().enumerate() {
        for v in 0..model.n_vars() {
            if s.mask.is_observed(v) {
                for &c in &layout.var_coords(v) {
                    upstream.row_mut(c)[b] = 0.0;
                }
            }
        }
    }
    Ok(LossTerms {
        loss: (1.0 - w) * pixel_loss + w * label_loss,
        pixel_loss,
        label_loss,
        upstream,
        dlogit,
        dlog_temp,
        correct,
    })
}

/// Bias-corrected adaptive-moment optimizer over one flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: usize,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// One update; rejects non-finite gradients without touching state.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::layout(format!(
                "adam_step: {} params / {} grads for state of {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "adam_step: gradient entry {i} is {}",
                grads[i]
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Optimizer over all model parameters: one Adam state per block plus one
/// for the biases and one for the log-temperatures.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub blocks: Vec<AdamState>,
    pub bias: AdamState,
    pub log_temp: AdamState,
}

impl Optimizer {
    pub fn new(model: &MdbmModel, learning_rate: f64) -> Self {
        Self {
            blocks: model
                .weights
                .blocks()
                .iter()
                .map(|b| AdamState::new(b.weights.len(), learning_rate))
                .collect(),
            bias: AdamState::new(model.total_len(), learning_rate),
            log_temp: AdamState::new(model.n_vars(), learning_rate),
        }
    }
}

/// Full parameter gradient of one batch.
#[derive(Debug, Clone)]
pub struct BatchGrads {
    pub phi: PhiGrads,
    pub bias: Vec<f64>,
    pub log_temp: Vec<f64>,
}

/// Metrics of one batch step.
#[derive(Debug, Clone)]
pub struct StepMetrics {
    pub loss: f64,
    pub pixel_loss: f64,
    pub label_loss: f64,
    pub correct: usize,
    pub fwd_iters: f64,
    pub bwd_iters: f64,
    pub skipped: bool,
}

/// Loss sums and gradients of one slice of a batch (gradients carry the
/// slice's sample weight, so partials add).
struct BatchPartial {
    grads: BatchGrads,
    loss: f64,
    pixel_loss: f64,
    label_loss: f64,
    correct: usize,
    fwd_iters: usize,
    bwd_iters: usize,
    len: usize,
}

/// Forward solve, loss and implicit backward on one contiguous slice of a
/// batch; gradients are rescaled so slice partials sum to the full-batch
/// mean gradient.
fn batch_pipeline(
    model: &MdbmModel,
    samples: &[MaskedSample],
    total: usize,
    pixel_weights: &[f64],
    solver: &SolverConfig,
    loss_cfg: &LossConfig,
) -> Result<BatchPartial> {
    let masks: Vec<Mask> = samples.iter().map(|s| s.mask.clone()).collect();
    let x = GroupedBatch::pack(&samples.iter().map(|s| s.x.clone()).collect::<Vec<_>>());
    let injection = meanfield::input_injection(&model.weights, &x, &masks, &model.bias)?;
    let (q_star, fwd_traces) =
        meanfield::solve_forward(&model.weights, &injection, &masks, solver)?;
    let fwd_iters = fwd_traces.iter().map(|t| t.iterations).sum::<usize>();

    let terms = marginal_loss(model, &q_star, samples, pixel_weights, loss_cfg)?;

    let back = meanfield::solve_backward(
        &model.weights,
        &q_star,
        &injection,
        &masks,
        &terms.upstream,
        solver,
    )?;
    let bwd_iters = back.traces.iter().map(|t| t.iterations).sum::<usize>();

    let mut grads = assemble_grads(model, samples, &q_star, &back.dprox_u, &terms, solver.alpha)?;
    // rescale from slice mean to batch mean
    let factor = samples.len() as f64 / total as f64;
    if factor != 1.0 {
        for g in grads.phi.blocks.iter_mut() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
        grads.phi.scale.iter_mut().for_each(|v| *v *= factor);
        grads.bias.iter_mut().for_each(|v| *v *= factor);
        grads.log_temp.iter_mut().for_each(|v| *v *= factor);
    }
    Ok(BatchPartial {
        grads,
        loss: terms.loss * factor,
        pixel_loss: terms.pixel_loss * factor,
        label_loss: terms.label_loss * factor,
        correct: terms.correct,
        fwd_iters,
        bwd_iters,
        len: samples.len(),
    })
}

/// Forward solve, loss, implicit backward, gradient assembly and one
/// optimizer step on a batch of masked samples, processed in per-thread
/// slices (partials combine in slice order, so results do not depend on
/// scheduling). Backward non-convergence skips the batch, reported through
/// the metrics.
pub fn train_batch(
    model: &mut MdbmModel,
    samples: &[MaskedSample],
    pixel_weights: &[f64],
    solver: &SolverConfig,
    loss_cfg: &LossConfig,
    opt: &mut Optimizer,
) -> Result<StepMetrics> {
    let threads = rayon::current_num_threads().max(1);
    let chunk = samples.len().div_ceil(threads);
    let slices: Vec<&[MaskedSample]> = samples.chunks(chunk).collect();
    let total = samples.len();
    let partials: Vec<Result<BatchPartial>> = if slices.len() == 1 {
        vec![batch_pipeline(model, slices[0], total, pixel_weights, solver, loss_cfg)]
    } else {
        use rayon::prelude::*;
        let shared: &MdbmModel = model;
        slices
            .par_iter()
            .map(|s| batch_pipeline(shared, s, total, pixel_weights, solver, loss_cfg))
            .collect()
    };

    let mut grads: Option<BatchGrads> = None;
    let mut loss = 0.0;
    let mut pixel_loss = 0.0;
    let mut label_loss = 0.0;
    let mut correct = 0usize;
    let mut fwd_iters = 0usize;
    let mut bwd_iters = 0usize;
    for partial in partials {
        let p = match partial {
            Ok(p) => p,
            Err(Error::NoConvergence { .. }) => {
                return Ok(StepMetrics {
                    loss: f64::NAN,
                    pixel_loss: f64::NAN,
                    label_loss: f64::NAN,
                    correct: 0,
                    fwd_iters: 0.0,
                    bwd_iters: solver.max_iter as f64,
                    skipped: true,
                })
            }
            Err(e) => return Err(e),
        };
        loss += p.loss;
        pixel_loss += p.pixel_loss;
        label_loss += p.label_loss;
        correct += p.correct;
        fwd_iters += p.fwd_iters;
        bwd_iters += p.bwd_iters;
        match grads.as_mut() {
            None => grads = Some(p.grads),
            Some(g) => {
                g.phi.scaled_add(&p.grads.phi, 1.0);
                for (a, b) in g.bias.iter_mut().zip(&p.grads.bias) {
                    *a += b;
                }
                for (a, b) in g.log_temp.iter_mut().zip(&p.grads.log_temp) {
                    *a += b;
                }
            }
        }
        let _ = p.len;
    }
    let grads = grads.expect("at least one slice");

    // optimizer step over every parameter family, then one refresh that
    // re-normalizes in monotone mode
    let mut new_weights: Vec<Vec<f64>> = model
        .weights
        .blocks()
        .iter()
        .map(|b| b.weights.clone())
        .collect();
    for (i, state) in opt.blocks.iter_mut().enumerate() {
        state.step(&mut new_weights[i], &grads.phi.blocks[i])?;
    }
    model
        .weights
        .update_blocks(model.monotone_mode, |i, w| w.copy_from_slice(&new_weights[i]))?;
    opt.bias.step(&mut model.bias, &grads.bias)?;
    opt.log_temp.step(&mut model.log_temp, &grads.log_temp)?;

    Ok(StepMetrics {
        loss,
        pixel_loss,
        label_loss,
        correct,
        fwd_iters: fwd_iters as f64 / total as f64,
        bwd_iters: bwd_iters as f64 / total as f64,
        skipped: false,
    })
}

/// Contract the backward fixed point and the direct loss terms against the
/// parameterization:
/// `d loss/d theta = alpha (D u*)^T d(Phi q~ + b)/d theta + (d loss/d z)^T d(Phi q~ + b)/d theta`.
pub fn assemble_grads(
    model: &MdbmModel,
    samples: &[MaskedSample],
    q_star: &GroupedBatch,
    dprox_u: &GroupedBatch,
    terms: &LossTerms,
    alpha: f64,
) -> Result<BatchGrads> {
    let layout = model.weights.layout();
    let batch = samples.len();
    let mut q_tilde = q_star.clone();
    for (b, s) in samples.iter().enumerate() {
        for v in 0..model.n_vars() {
            if s.mask.is_observed(v) {
                for &c in &layout.var_coords(v) {
                    q_tilde.row_mut(c)[b] = s.x[c];
                }
            }
        }
    }
    let mut phi = PhiGrads::zeros_like(&model.weights);
    // the implicit path (through the fixed point) and the direct path
    // (through the loss logits) contract against the same q~, so they fold
    // into one bilinear gradient: w = alpha D u* + d loss/d z
    let mut w = dprox_u.clone();
    for (wv, dl) in w.data.iter_mut().zip(&terms.dlogit.data) {
        *wv = alpha * *wv + dl;
    }
    model
        .weights
        .accumulate_phi_bilinear_grad(&w, &q_tilde, 1.0, &mut phi)?;
    if model.monotone_mode {
        model.weights.chain_scale_grad(&mut phi);
    }

    let mut bias = vec![0.0; model.total_len()];
    for c in 0..model.total_len() {
        let (du, dl) = (dprox_u.row(c), terms.dlogit.row(c));
        let mut acc = 0.0;
        for b in 0..batch {
            acc += alpha * du[b] + dl[b];
        }
        bias[c] = acc;
    }
    Ok(BatchGrads {
        phi,
        bias,
        log_temp: terms.dlog_temp.clone(),
    })
}

/// Metrics of one epoch.
#[derive(Debug, Clone)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
    pub mean_fwd_iters: f64,
    pub mean_bwd_iters: f64,
    pub skipped_batches: usize,
    pub wall_time_s: f64,
}

impl EpochMetrics {
    pub fn csv_header() -> &'static str {
        "epoch,mean_loss,accuracy,mean_fwd_iters,mean_bwd_iters,wall_time_s"
    }

    pub fn csv_row(&self, with_time: bool) -> String {
        let time = if with_time {
            format!("{:.3}", self.wall_time_s)
        } else {
            String::new()
        };
        format!(
            "{},{:.6e},{:.4},{:.3},{:.3},{}",
            self.epoch, self.mean_loss, self.accuracy, self.mean_fwd_iters, self.mean_bwd_iters, time
        )
    }
}

/// One pass over a dataset of masked samples: per-epoch pixel class counts,
/// batched steps, and averaged metrics.
pub fn train_epoch(
    model: &mut MdbmModel,
    samples: &[MaskedSample],
    batch_size: usize,
    solver: &SolverConfig,
    loss_cfg: &LossConfig,
    opt: &mut Optimizer,
    epoch: usize,
) -> Result<EpochMetrics> {
    let start = std::time::Instant::now();
    let pixel_weights = epoch_pixel_weights(model, samples, loss_cfg.class_weight_beta)?;
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut labeled = 0usize;
    let mut fwd = 0.0;
    let mut bwd = 0.0;
    let mut batches = 0usize;
    let mut skipped = 0usize;
    for chunk in samples.chunks(batch_size) {
        let m = train_batch(model, chunk, &pixel_weights, solver, loss_cfg, opt)?;
        if m.skipped {
            skipped += 1;
            continue;
        }
        loss_sum += m.loss;
        correct += m.correct;
        labeled += chunk.len();
        fwd += m.fwd_iters;
        bwd += m.bwd_iters;
        batches += 1;
    }
    Ok(EpochMetrics {
        epoch,
        mean_loss: loss_sum / batches.max(1) as f64,
        accuracy: correct as f64 / labeled.max(1) as f64,
        mean_fwd_iters: fwd / batches.max(1) as f64,
        mean_bwd_iters: bwd / batches.max(1) as f64,
        skipped_batches: skipped,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Per-bin counts over the hidden pixels of the epoch, turned into class
/// weights (bins that never appear hidden get weight 1).
pub fn epoch_pixel_weights(
    model: &MdbmModel,
    samples: &[MaskedSample],
    beta: f64,
) -> Result<Vec<f64>> {
    let layout = model.weights.layout();
    let pl = model.arch.pixel_layer;
    let bins = layout.layers()[pl].cardinality();
    let mut counts = vec![0usize; bins];
    let pixel_vars: Vec<usize> = (layout.var_base(pl)
        ..layout.var_base(pl) + layout.layers()[pl].n_vars())
        .collect();
    for s in samples {
        for &v in &pixel_vars {
            if s.mask.is_observed(v) {
                continue;
            }
            if let Some(bin) = layout
                .var_coords(v)
                .iter()
                .position(|&c| s.x[c] == 1.0)
            {
                counts[bin] += 1;
            }
        }
    }
    counts
        .iter()
        .map(|&n| {
            if n == 0 {
                Ok(1.0)
            } else if beta == 0.0 {
                Ok(1.0)
            } else {
                Ok((1.0 - beta) / (1.0 - beta.powi(n as i32)))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_weights_unit_count_is_one() {
        for beta in [0.1, 0.5, 0.9999] {
            let w = class_weights(&[1], beta).unwrap();
            assert!((w[0] - 1.0).abs() < 1e-12, "beta={beta}");
        }
    }

    #[test]
    fn class_weights_beta_zero_limit() {
        let w = class_weights(&[1, 10, 10_000], 0.0).unwrap();
        assert!(w.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn class_weights_reference_value() {
        let w = class_weights(&[10_000], 0.9999).unwrap();
        let expect = 1e-4 / (1.0 - 0.9999f64.powi(10_000));
        assert!((w[0] - expect).abs() < 1e-12);
        assert!((w[0] - 1.5820e-4).abs() < 1e-7, "got {}", w[0]);
    }

    #[test]
    fn class_weights_reject_zero_count() {
        assert!(class_weights(&[0], 0.5).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut adam = AdamState::new(3, 0.01);
        let mut p = vec![1.0, -2.0, 0.5];
        adam.step(&mut p, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_first_step_magnitude_is_learning_rate() {
        let mut adam = AdamState::new(2, 0.001);
        let mut p = vec![0.0, 0.0];
        adam.step(&mut p, &[3.5, -0.2]).unwrap();
        // bias-corrected ratio is sign(g) on the first step
        assert!((p[0] + 0.001).abs() < 1e-9, "{}", p[0]);
        assert!((p[1] - 0.001).abs() < 1e-9, "{}", p[1]);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut adam = AdamState::new(1, 0.01);
        let mut p = vec![1.0];
        assert!(adam.step(&mut p, &[f64::NAN]).is_err());
        assert_eq!(p, vec![1.0]);
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut adam = AdamState::new(2, 0.01);
            let mut p = vec![0.3, -0.4];
            for i in 0..50 {
                let g = [0.1 * (i as f64).sin(), (i as f64).cos()];
                adam.step(&mut p, &g).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }
}
