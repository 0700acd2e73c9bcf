//! Model assembly: layers, potentials, biases and temperatures, plus the
//! exact brute-force oracles (enumeration, sequential coordinate ascent)
//! that the parallel solvers are validated against.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linops::{BlockSpec, BlockWeights, GroupedBatch, LayerSpec};
use crate::meanfield::{self, SolverConfig};
use crate::prox::softmax_in_place;

/// Architecture description: layers, blocks, margin, and which layers carry
/// data (pixels) and labels.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Arch {
    pub layers: Vec<LayerSpec>,
    pub blocks: Vec<BlockSpec>,
    pub margin: f64,
    pub pixel_layer: usize,
    pub label_layer: Option<usize>,
}

impl Arch {
    /// Four-tier convolutional stack for `bins`-ary images: a pixel layer
    /// with intra-layer 3x3 connections, two strided latent tiers, and a
    /// dense label variable on top. `height` and `width` must be divisible
    /// by 4.
    pub fn conv_stack(
        height: usize,
        width: usize,
        bins: usize,
        classes: usize,
        c1: usize,
        c2: usize,
    ) -> Result<Arch> {
        if height % 4 != 0 || width % 4 != 0 {
            return Err(Error::config("conv_stack needs dimensions divisible by 4"));
        }
        if c1 % bins != 0 || c2 % bins != 0 {
            return Err(Error::config(
                "latent channels must be a multiple of the pixel cardinality",
            ));
        }
        let layers = vec![
            LayerSpec::new(bins, height, width, 1),
            LayerSpec::new(c1, height / 2, width / 2, c1 / bins),
            LayerSpec::new(c2, height / 4, width / 4, c2 / bins),
            LayerSpec::dense(classes, 1),
        ];
        let conv = |in_layer: usize, out_layer: usize, ci: usize, co: usize, stride: usize| {
            BlockSpec::Conv2d {
                in_layer,
                out_layer,
                out_channels: co,
                in_channels: ci,
                kernel: 3,
                stride,
                padding: 1,
            }
        };
        let blocks = vec![
            conv(0, 0, bins, bins, 1),
            conv(0, 1, bins, c1, 2),
            conv(1, 1, c1, c1, 1),
            conv(0, 2, bins, c2, 4),
            conv(1, 2, c1, c2, 2),
            conv(2, 2, c2, c2, 1),
            BlockSpec::Dense {
                in_layer: 2,
                out_layer: 3,
                rows: classes,
                cols: c2 * (height / 4) * (width / 4),
            },
            BlockSpec::Dense {
                in_layer: 3,
                out_layer: 3,
                rows: classes,
                cols: classes,
            },
        ];
        Ok(Arch {
            layers,
            blocks,
            margin: 0.1,
            pixel_layer: 0,
            label_layer: Some(3),
        })
    }

    /// Desk-scale digit model matching the reference four-tier structure.
    pub fn digits_default(bins: usize) -> Arch {
        Arch::conv_stack(28, 28, bins, 10, 10 * bins, 20 * bins).expect("static dims")
    }

    /// Same stack with channels halved.
    pub fn digits_halved(bins: usize) -> Arch {
        Arch::conv_stack(28, 28, bins, 10, 5 * bins, 10 * bins).expect("static dims")
    }

    /// A single dense layer of `n_vars` categorical variables, fully
    /// pairwise-connected via one square block. No label.
    pub fn dense_toy(n_vars: usize, cardinality: usize, margin: f64) -> Arch {
        let len = n_vars * cardinality;
        Arch {
            layers: vec![LayerSpec::dense(len, n_vars)],
            blocks: vec![BlockSpec::Dense {
                in_layer: 0,
                out_layer: 0,
                rows: len,
                cols: len,
            }],
            margin,
            pixel_layer: 0,
            label_layer: None,
        }
    }

    /// Dense toy with a label: `n_pixels` data variables of the given
    /// cardinality plus one label variable, all pairwise-connected.
    pub fn tiny_labeled(n_pixels: usize, bins: usize, classes: usize, margin: f64) -> Arch {
        let plen = n_pixels * bins;
        Arch {
            layers: vec![LayerSpec::dense(plen, n_pixels), LayerSpec::dense(classes, 1)],
            blocks: vec![
                BlockSpec::Dense {
                    in_layer: 0,
                    out_layer: 0,
                    rows: plen,
                    cols: plen,
                },
                BlockSpec::Dense {
                    in_layer: 0,
                    out_layer: 1,
                    rows: classes,
                    cols: plen,
                },
                BlockSpec::Dense {
                    in_layer: 1,
                    out_layer: 1,
                    rows: classes,
                    cols: classes,
                },
            ],
            margin,
            pixel_layer: 0,
            label_layer: Some(1),
        }
    }
}

/// Partition of the variables into observed and hidden.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    observed: Vec<bool>,
}

impl Mask {
    pub fn new(observed: Vec<bool>) -> Self {
        Self { observed }
    }

    pub fn all_hidden(n_vars: usize) -> Self {
        Self {
            observed: vec![false; n_vars],
        }
    }

    pub fn n_vars(&self) -> usize {
        self.observed.len()
    }

    pub fn is_observed(&self, v: usize) -> bool {
        self.observed[v]
    }

    pub fn set_observed(&mut self, v: usize, val: bool) {
        self.observed[v] = val;
    }

    pub fn hidden_count(&self) -> usize {
        self.observed.iter().filter(|o| !**o).count()
    }

    pub fn hidden_vars(&self) -> impl Iterator<Item = usize> + '_ {
        self.observed
            .iter()
            .enumerate()
            .filter(|(_, o)| !**o)
            .map(|(v, _)| v)
    }
}

/// One-hot encoded data split into observed and hidden variables. Latent
/// variables carry zeros in `x` and are always hidden.
#[derive(Debug, Clone)]
pub struct MaskedSample {
    pub x: Vec<f64>,
    pub mask: Mask,
}

/// A monotone deep Boltzmann machine: the normalized potential, unary
/// biases, and per-variable temperatures for post-convergence sharpening.
#[derive(Debug, Clone)]
pub struct MdbmModel {
    pub arch: Arch,
    pub weights: BlockWeights,
    /// Unary potential, one entry per coordinate.
    pub bias: Vec<f64>,
    /// Log temperature per variable (applied to output groups only).
    pub log_temp: Vec<f64>,
    pub monotone_mode: bool,
}

impl MdbmModel {
    /// Random initialization: block weights drawn from a per-block normal
    /// with fan-in scaling, biases zero, temperatures one. When
    /// `monotone_mode` is set, the weights are spectrally normalized.
    pub fn init(arch: &Arch, seed: u64, monotone_mode: bool) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(arch.blocks.len());
        for spec in &arch.blocks {
            let fan_in = match spec {
                BlockSpec::Dense { cols, .. } => *cols,
                BlockSpec::Conv2d {
                    in_channels,
                    kernel,
                    ..
                } => in_channels * kernel * kernel,
            };
            let std = 1.0 / (fan_in as f64).sqrt();
            let dist = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
            let w: Vec<f64> = (0..spec.param_len()).map(|_| dist.sample(&mut rng)).collect();
            blocks.push((spec.clone(), w));
        }
        let mut weights = BlockWeights::new(arch.layers.clone(), blocks, arch.margin)?;
        if monotone_mode {
            weights.normalize_in_place()?;
        }
        let total = weights.layout().total_len();
        let n_vars = weights.layout().n_vars();
        Ok(Self {
            arch: arch.clone(),
            weights,
            bias: vec![0.0; total],
            log_temp: vec![0.0; n_vars],
            monotone_mode,
        })
    }

    pub fn n_vars(&self) -> usize {
        self.weights.layout().n_vars()
    }

    pub fn total_len(&self) -> usize {
        self.weights.layout().total_len()
    }

    /// Variable id of the label, when the architecture has one.
    pub fn label_var(&self) -> Option<usize> {
        let l = self.arch.label_layer?;
        debug_assert_eq!(self.weights.layout().layers()[l].n_vars(), 1);
        Some(self.weights.layout().var_base(l))
    }

    /// Variables the losses and predictions read: the pixel layer plus the
    /// label variable.
    pub fn output_vars(&self) -> Vec<usize> {
        let layout = self.weights.layout();
        let pl = self.arch.pixel_layer;
        let mut vars: Vec<usize> =
            (layout.var_base(pl)..layout.var_base(pl) + layout.layers()[pl].n_vars()).collect();
        if let Some(l) = self.label_var() {
            vars.push(l);
        }
        vars
    }

    fn check_one_hot(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.total_len() {
            return Err(Error::layout(format!(
                "assignment has {} coordinates, model expects {}",
                x.len(),
                self.total_len()
            )));
        }
        let layout = self.weights.layout();
        let mut bad = None;
        layout.for_each_var(|v, layer, coord0, stride| {
            if bad.is_some() {
                return;
            }
            let k = layout.layers()[layer].cardinality();
            let mut sum = 0.0;
            for j in 0..k {
                let val = x[coord0 + j * stride];
                if val != 0.0 && val != 1.0 {
                    bad = Some(v);
                    return;
                }
                sum += val;
            }
            if sum != 1.0 {
                bad = Some(v);
            }
        });
        match bad {
            Some(v) => Err(Error::domain(format!(
                "assignment is not one-hot at variable {v}"
            ))),
            None => Ok(()),
        }
    }

    /// Energy of a full one-hot assignment: `0.5 x^T Phi x + b^T x`, which
    /// counts every undirected edge once.
    pub fn energy(&self, x: &[f64]) -> Result<f64> {
        self.check_one_hot(x)?;
        let phi_x = self.weights.apply_phi(&GroupedBatch::single(x.to_vec()))?;
        let quad: f64 = x.iter().zip(&phi_x.data).map(|(a, b)| a * b).sum();
        let lin: f64 = x.iter().zip(&self.bias).map(|(a, b)| a * b).sum();
        Ok(0.5 * quad + lin)
    }

    /// Exact conditional marginals by enumerating every hidden assignment.
    /// Refuses state spaces above `10^6`.
    pub fn exact_conditional_marginals(&self, sample: &MaskedSample) -> Result<Vec<f64>> {
        let layout = self.weights.layout();
        let hidden: Vec<usize> = sample.mask.hidden_vars().collect();
        if hidden.is_empty() {
            return Ok(sample.x.clone());
        }
        let cards: Vec<usize> = hidden.iter().map(|&v| layout.var_cardinality(v)).collect();
        let mut states = 1usize;
        for &k in &cards {
            states = states.saturating_mul(k);
            if states > 1_000_000 {
                return Err(Error::config(format!(
                    "exact enumeration refused: {} hidden variables exceed 1e6 states",
                    hidden.len()
                )));
            }
        }
        let phi = self.weights.materialize_dense()?;

        let coords: Vec<Vec<usize>> = hidden.iter().map(|&v| layout.var_coords(v)).collect();
        let mut x_obs = vec![0.0; self.total_len()];
        for v in 0..layout.n_vars() {
            if sample.mask.is_observed(v) {
                for &c in &layout.var_coords(v) {
                    x_obs[c] = sample.x[c];
                }
            }
        }
        let n = self.total_len();
        // unary[hi][a] = b + (Phi x_obs) restricted to the hidden coordinate
        let unary: Vec<Vec<f64>> = (0..hidden.len())
            .map(|hi| {
                coords[hi]
                    .iter()
                    .map(|&c| {
                        let mut e = self.bias[c];
                        for j in 0..n {
                            if x_obs[j] != 0.0 {
                                e += phi[(c, j)] * x_obs[j];
                            }
                        }
                        e
                    })
                    .collect()
            })
            .collect();
        // pair[hi][hj] flattened table for hi < hj
        let pair: Vec<Vec<Vec<f64>>> = (0..hidden.len())
            .map(|hi| {
                (0..hidden.len())
                    .map(|hj| {
                        if hj <= hi {
                            Vec::new()
                        } else {
                            let mut tbl = vec![0.0; cards[hi] * cards[hj]];
                            for a in 0..cards[hi] {
                                for b in 0..cards[hj] {
                                    tbl[a * cards[hj] + b] = phi[(coords[hi][a], coords[hj][b])];
                                }
                            }
                            tbl
                        }
                    })
                    .collect()
            })
            .collect();

        let mut assignment = vec![0usize; hidden.len()];
        let mut acc: Vec<Vec<LogSumExp>> = cards
            .iter()
            .map(|&k| (0..k).map(|_| LogSumExp::new()).collect())
            .collect();
        let mut total = LogSumExp::new();
        loop {
            let mut e = 0.0;
            for hi in 0..hidden.len() {
                e += unary[hi][assignment[hi]];
                for hj in (hi + 1)..hidden.len() {
                    e += pair[hi][hj][assignment[hi] * cards[hj] + assignment[hj]];
                }
            }
            total.add(e);
            for hi in 0..hidden.len() {
                acc[hi][assignment[hi]].add(e);
            }
            // odometer
            let mut pos = 0;
            loop {
                if pos == hidden.len() {
                    break;
                }
                assignment[pos] += 1;
                if assignment[pos] < cards[pos] {
                    break;
                }
                assignment[pos] = 0;
                pos += 1;
            }
            if pos == hidden.len() {
                break;
            }
        }
        let log_z = total.value();
        let mut out = x_obs;
        for hi in 0..hidden.len() {
            for a in 0..cards[hi] {
                out[coords[hi][a]] = (acc[hi][a].value() - log_z).exp();
            }
        }
        Ok(out)
    }

    /// Classical sequential mean-field: cycle over hidden variables applying
    /// `q_i <- softmax((Phi q)_i + b_i)` until the largest per-sweep change
    /// falls below `tol`. Returns `(marginals, sweeps, converged)`.
    pub fn coordinate_ascent_meanfield(
        &self,
        sample: &MaskedSample,
        tol: f64,
        max_sweeps: usize,
    ) -> Result<(Vec<f64>, usize, bool)> {
        self.coordinate_ascent_from(sample, tol, max_sweeps, None)
    }

    /// As [`Self::coordinate_ascent_meanfield`] but from a caller-supplied
    /// starting point for the hidden marginals (used to expose the
    /// multi-modality of non-monotone models).
    pub fn coordinate_ascent_from(
        &self,
        sample: &MaskedSample,
        tol: f64,
        max_sweeps: usize,
        init: Option<&[f64]>,
    ) -> Result<(Vec<f64>, usize, bool)> {
        let layout = self.weights.layout();
        let phi = self.weights.materialize_dense()?;
        let mut q = vec![0.0; self.total_len()];
        for v in 0..layout.n_vars() {
            let coords = layout.var_coords(v);
            if sample.mask.is_observed(v) {
                for &c in &coords {
                    q[c] = sample.x[c];
                }
            } else {
                match init {
                    Some(start) => {
                        for &c in &coords {
                            q[c] = start[c];
                        }
                    }
                    None => {
                        let k = coords.len() as f64;
                        for &c in &coords {
                            q[c] = 1.0 / k;
                        }
                    }
                }
            }
        }
        let hidden: Vec<Vec<usize>> = sample
            .mask
            .hidden_vars()
            .map(|v| layout.var_coords(v))
            .collect();
        let n = self.total_len();
        let mut sweeps = 0;
        let mut converged = false;
        let mut pre = Vec::new();
        while sweeps < max_sweeps {
            sweeps += 1;
            let mut max_change = 0.0f64;
            for coords in &hidden {
                pre.clear();
                for &c in coords {
                    let mut e = self.bias[c];
                    for j in 0..n {
                        let qj = q[j];
                        if qj != 0.0 {
                            e += phi[(c, j)] * qj;
                        }
                    }
                    pre.push(e);
                }
                softmax_in_place(&mut pre);
                for (j, &c) in coords.iter().enumerate() {
                    max_change = max_change.max((pre[j] - q[c]).abs());
                    q[c] = pre[j];
                }
            }
            if max_change <= tol {
                converged = true;
                break;
            }
        }
        Ok((q, sweeps, converged))
    }

    /// Temperature scaling `q~ ∝ q^tau` applied to the output groups only;
    /// other variables are left untouched.
    pub fn temperature_scale(&self, marginals: &mut [f64]) {
        let layout = self.weights.layout();
        for v in self.output_vars() {
            let tau = self.log_temp[v].exp();
            if tau == 1.0 {
                continue;
            }
            let coords = layout.var_coords(v);
            let mut logs: Vec<f64> = coords
                .iter()
                .map(|&c| tau * marginals[c].max(1e-300).ln())
                .collect();
            softmax_in_place(&mut logs);
            for (j, &c) in coords.iter().enumerate() {
                marginals[c] = logs[j];
            }
        }
    }

    /// Mean-field prediction: inject the observed variables, solve the
    /// damped fixed point, and sharpen the output marginals by their
    /// temperatures (after convergence only). Returns the full marginal
    /// vector, the label distribution when the model has one, and the
    /// solver trace.
    pub fn predict(&self, sample: &MaskedSample, config: &SolverConfig) -> Result<Prediction> {
        let batch = GroupedBatch::single(sample.x.clone());
        let masks = std::slice::from_ref(&sample.mask);
        let injection = meanfield::input_injection(&self.weights, &batch, masks, &self.bias)?;
        let (q, traces) = meanfield::solve_forward(&self.weights, &injection, masks, config)?;
        let mut marginals = q.column(0);
        for v in 0..self.n_vars() {
            if sample.mask.is_observed(v) {
                for &c in &self.weights.layout().var_coords(v) {
                    marginals[c] = sample.x[c];
                }
            }
        }
        self.temperature_scale(&mut marginals);
        let label_distribution = self.label_var().map(|lv| {
            self.weights
                .layout()
                .var_coords(lv)
                .iter()
                .map(|&c| marginals[c])
                .collect()
        });
        Ok(Prediction {
            marginals,
            label_distribution,
            trace: traces.into_iter().next().expect("one sample"),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub marginals: Vec<f64>,
    pub label_distribution: Option<Vec<f64>>,
    pub trace: crate::meanfield::InferenceTrace,
}

/// Streaming log-sum-exp accumulator.
struct LogSumExp {
    max: f64,
    sum: f64,
}

impl LogSumExp {
    fn new() -> Self {
        Self {
            max: f64::NEG_INFINITY,
            sum: 0.0,
        }
    }

    fn add(&mut self, x: f64) {
        if x <= self.max {
            self.sum += (x - self.max).exp();
        } else {
            self.sum = self.sum * (self.max - x).exp() + 1.0;
            self.max = x;
        }
    }

    fn value(&self) -> f64 {
        self.max + self.sum.ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_model(seed: u64, n_vars: usize, k: usize) -> MdbmModel {
        let arch = Arch::dense_toy(n_vars, k, 0.1);
        MdbmModel::init(&arch, seed, true).unwrap()
    }

    fn one_hot_assignment(model: &MdbmModel, cats: &[usize]) -> Vec<f64> {
        let layout = model.weights.layout();
        let mut x = vec![0.0; model.total_len()];
        for (v, &a) in cats.iter().enumerate() {
            x[layout.var_coord(v, a)] = 1.0;
        }
        x
    }

    #[test]
    fn zero_model_energy_is_zero() {
        let arch = Arch::dense_toy(3, 2, 0.1);
        let mut model = MdbmModel::init(&arch, 0, false).unwrap();
        model
            .weights
            .update_blocks(false, |_, w| w.iter_mut().for_each(|x| *x = 0.0))
            .unwrap();
        for cats in [[0, 0, 0], [1, 0, 1], [1, 1, 1]] {
            let x = one_hot_assignment(&model, &cats);
            assert_eq!(model.energy(&x).unwrap(), 0.0);
        }
    }

    #[test]
    fn energy_counts_each_edge_once() {
        // craft Phi_12 = [[1,0],[0,0]] via A1 = I, A2 = [[-1,0],[0,0]]
        let arch = Arch::dense_toy(2, 2, 0.1);
        let mut model = MdbmModel::init(&arch, 0, false).unwrap();
        model
            .weights
            .update_blocks(false, |_, w| {
                w.copy_from_slice(&[
                    1.0, 0.0, -1.0, 0.0, //
                    0.0, 1.0, 0.0, 0.0, //
                    0.0, 0.0, 0.0, 0.0, //
                    0.0, 0.0, 0.0, 0.0,
                ]);
            })
            .unwrap();
        let x = one_hot_assignment(&model, &[0, 0]);
        assert!((model.energy(&x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn energy_rejects_non_one_hot() {
        let model = toy_model(1, 3, 2);
        let mut x = one_hot_assignment(&model, &[0, 0, 0]);
        x[0] = 0.5;
        assert!(model.energy(&x).is_err());
    }

    #[test]
    fn energy_matches_dense_quadratic_form() {
        let model = toy_model(7, 3, 3);
        let phi = model.weights.materialize_dense().unwrap();
        for cats in [[0usize, 1, 2], [2, 2, 0], [1, 1, 1]] {
            let x = one_hot_assignment(&model, &cats);
            let mut e = 0.0;
            for i in 0..x.len() {
                for j in 0..x.len() {
                    e += 0.5 * x[i] * phi[(i, j)] * x[j];
                }
            }
            for i in 0..x.len() {
                e += model.bias[i] * x[i];
            }
            assert!((model.energy(&x).unwrap() - e).abs() < 1e-10);
        }
    }

    #[test]
    fn exact_marginals_factorize_when_phi_zero() {
        let arch = Arch::dense_toy(3, 2, 0.1);
        let mut model = MdbmModel::init(&arch, 2, false).unwrap();
        model
            .weights
            .update_blocks(false, |_, w| w.iter_mut().for_each(|x| *x = 0.0))
            .unwrap();
        let layout = model.weights.layout().clone();
        for v in 0..3 {
            model.bias[layout.var_coord(v, 0)] = 0.3 * v as f64;
            model.bias[layout.var_coord(v, 1)] = -0.1;
        }
        let sample = MaskedSample {
            x: vec![0.0; model.total_len()],
            mask: Mask::all_hidden(3),
        };
        let marg = model.exact_conditional_marginals(&sample).unwrap();
        for v in 0..3 {
            let c0 = layout.var_coord(v, 0);
            let c1 = layout.var_coord(v, 1);
            let mut sm = vec![model.bias[c0], model.bias[c1]];
            softmax_in_place(&mut sm);
            assert!((marg[c0] - sm[0]).abs() < 1e-12);
            assert!((marg[c1] - sm[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_marginals_fully_observed_returns_input() {
        let model = toy_model(3, 2, 2);
        let x = one_hot_assignment(&model, &[1, 0]);
        let sample = MaskedSample {
            x: x.clone(),
            mask: Mask::new(vec![true, true]),
        };
        assert_eq!(model.exact_conditional_marginals(&sample).unwrap(), x);
    }

    #[test]
    fn exact_marginals_match_hand_enumeration() {
        // 4-variable model, k=3: re-enumerate independently through the
        // energy function
        let model = toy_model(11, 4, 3);
        let layout = model.weights.layout().clone();
        let mut x = vec![0.0; model.total_len()];
        x[layout.var_coord(0, 2)] = 1.0;
        let mut mask = Mask::all_hidden(4);
        mask.set_observed(0, true);
        let sample = MaskedSample { x, mask };
        let marg = model.exact_conditional_marginals(&sample).unwrap();

        let mut weights = vec![vec![0.0; 3]; 4];
        let mut z = 0.0;
        for a1 in 0..3 {
            for a2 in 0..3 {
                for a3 in 0..3 {
                    let x = one_hot_assignment(&model, &[2, a1, a2, a3]);
                    let w = model.energy(&x).unwrap().exp();
                    z += w;
                    weights[1][a1] += w;
                    weights[2][a2] += w;
                    weights[3][a3] += w;
                }
            }
        }
        for v in 1..4 {
            for a in 0..3 {
                let got = marg[layout.var_coord(v, a)];
                let want = weights[v][a] / z;
                assert!(
                    (got - want).abs() < 1e-10,
                    "var {v} cat {a}: {got} vs {want}"
                );
            }
        }
        assert_eq!(marg[layout.var_coord(0, 2)], 1.0);
    }

    #[test]
    fn coordinate_ascent_converges_to_softmax_when_phi_zero() {
        let arch = Arch::dense_toy(2, 3, 0.1);
        let mut model = MdbmModel::init(&arch, 4, false).unwrap();
        model
            .weights
            .update_blocks(false, |_, w| w.iter_mut().for_each(|x| *x = 0.0))
            .unwrap();
        let layout = model.weights.layout().clone();
        model.bias[layout.var_coord(0, 0)] = 1.0;
        model.bias[layout.var_coord(1, 2)] = -0.5;
        let sample = MaskedSample {
            x: vec![0.0; model.total_len()],
            mask: Mask::all_hidden(2),
        };
        let (q, sweeps, converged) =
            model.coordinate_ascent_meanfield(&sample, 1e-12, 10).unwrap();
        assert!(converged && sweeps <= 2, "sweeps={sweeps}");
        for v in 0..2 {
            let coords = layout.var_coords(v);
            let mut sm: Vec<f64> = coords.iter().map(|&c| model.bias[c]).collect();
            softmax_in_place(&mut sm);
            for (j, &c) in coords.iter().enumerate() {
                assert!((q[c] - sm[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn temperature_scaling_preserves_argmax() {
        let model = toy_model(5, 4, 3);
        let mut m = MdbmModel {
            log_temp: vec![2.3; model.n_vars()],
            ..model
        };
        let layout = m.weights.layout().clone();
        let mut marg = vec![0.0; m.total_len()];
        for v in 0..m.n_vars() {
            let coords = layout.var_coords(v);
            let mut vals = vec![0.25, 0.45, 0.3];
            if v % 2 == 0 {
                vals.rotate_left(1);
            }
            for (j, &c) in coords.iter().enumerate() {
                marg[c] = vals[j];
            }
        }
        let before = marg.clone();
        m.temperature_scale(&mut marg);
        for v in m.output_vars() {
            let coords = layout.var_coords(v);
            let argmax = |vals: &[f64]| {
                coords
                    .iter()
                    .enumerate()
                    .max_by(|a, b| vals[*a.1].total_cmp(&vals[*b.1]))
                    .unwrap()
                    .0
            };
            let (am_before, am_after) = (argmax(&before), argmax(&marg));
            assert_eq!(am_before, am_after);
            let sum: f64 = coords.iter().map(|&c| marg[c]).sum();
            assert!((sum - 1.0).abs() < 1e-12);
            // tau > 1 sharpens toward the argmax
            assert!(marg[coords[am_after]] > before[coords[am_before]]);
        }
    }

    #[test]
    fn identity_temperature_is_identity() {
        let model = toy_model(4, 2, 5);
        let mut marg: Vec<f64> = (0..model.total_len())
            .map(|i| if i % 2 == 0 { 0.3 } else { 0.7 })
            .collect();
        let before = marg.clone();
        model.temperature_scale(&mut marg);
        assert_eq!(before, marg);
    }
}
