//! Deep restricted Boltzmann machine baseline: a chain of Bernoulli layers
//! with bipartite connections, trained by contrastive divergence, with
//! Gibbs sampling and damped block mean-field inference.
//!
//! Energy convention: `E(x) = -sum_l b_l^T x_l - sum_l x_l^T W_l x_{l+1}`,
//! `p(x) ∝ exp(-E(x))`, so every conditional is a sigmoid of the affine
//! pre-activation from the adjacent layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-unit clamping: clamped units hold their value through sampling and
/// mean-field updates.
#[derive(Debug, Clone)]
pub struct RbmClamp {
    pub mask: Vec<Vec<bool>>,
    pub value: Vec<Vec<f64>>,
}

impl RbmClamp {
    pub fn none(sizes: &[usize]) -> Self {
        Self {
            mask: sizes.iter().map(|&n| vec![false; n]).collect(),
            value: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Clamp an entire layer to the given values.
    pub fn clamp_layer(&mut self, layer: usize, values: &[f64]) {
        self.mask[layer].iter_mut().for_each(|m| *m = true);
        self.value[layer].copy_from_slice(values);
    }

    pub fn clamp_unit(&mut self, layer: usize, unit: usize, value: f64) {
        self.mask[layer][unit] = true;
        self.value[layer][unit] = value;
    }
}

/// Layered Bernoulli machine with no intra-layer weights.
#[derive(Debug, Clone)]
pub struct DeepRbm {
    sizes: Vec<usize>,
    /// `weights[l]` connects layer `l` to `l+1`, row-major `sizes[l] x sizes[l+1]`.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl DeepRbm {
    pub fn init(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::config("an RBM needs at least two layers"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 0.01).map_err(|e| Error::config(e.to_string()))?;
        let weights = sizes
            .windows(2)
            .map(|w| (0..w[0] * w[1]).map(|_| dist.sample(&mut rng)).collect())
            .collect();
        let biases = sizes.iter().map(|&n| vec![0.0; n]).collect();
        Ok(Self {
            sizes: sizes.to_vec(),
            weights,
            biases,
        })
    }

    pub fn from_parts(
        sizes: Vec<usize>,
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if weights.len() + 1 != sizes.len() || biases.len() != sizes.len() {
            return Err(Error::config("rbm parts do not match the layer count"));
        }
        for (l, w) in weights.iter().enumerate() {
            if w.len() != sizes[l] * sizes[l + 1] {
                return Err(Error::config(format!("rbm weight block {l} has wrong size")));
            }
        }
        for (l, b) in biases.iter().enumerate() {
            if b.len() != sizes[l] {
                return Err(Error::config(format!("rbm bias {l} has wrong size")));
            }
        }
        Ok(Self {
            sizes,
            weights,
            biases,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len()
    }

    /// Bernoulli means of one layer given its neighbors' values.
    pub fn conditional(
        &self,
        layer: usize,
        below: Option<&[f64]>,
        above: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        if layer >= self.sizes.len() {
            return Err(Error::layout(format!("layer {layer} out of range")));
        }
        match (layer > 0, below.is_some()) {
            (true, false) => {
                return Err(Error::layout(format!("layer {layer} needs its lower neighbor")))
            }
            (false, true) => return Err(Error::layout("layer 0 has no lower neighbor".to_string())),
            _ => {}
        }
        match (layer + 1 < self.sizes.len(), above.is_some()) {
            (true, false) => {
                return Err(Error::layout(format!("layer {layer} needs its upper neighbor")))
            }
            (false, true) => return Err(Error::layout("top layer has no upper neighbor".to_string())),
            _ => {}
        }
        let n = self.sizes[layer];
        let mut pre = self.biases[layer].clone();
        if let Some(v) = below {
            if v.len() != self.sizes[layer - 1] {
                return Err(Error::layout(format!(
                    "below has {} units, layer {} has {}",
                    v.len(),
                    layer - 1,
                    self.sizes[layer - 1]
                )));
            }
            let w = &self.weights[layer - 1];
            for (i, &vi) in v.iter().enumerate() {
                if vi == 0.0 {
                    continue;
                }
                let row = &w[i * n..(i + 1) * n];
                for j in 0..n {
                    pre[j] += vi * row[j];
                }
            }
        }
        if let Some(h) = above {
            if h.len() != self.sizes[layer + 1] {
                return Err(Error::layout(format!(
                    "above has {} units, layer {} has {}",
                    h.len(),
                    layer + 1,
                    self.sizes[layer + 1]
                )));
            }
            let w = &self.weights[layer];
            let m = self.sizes[layer + 1];
            for j in 0..n {
                let row = &w[j * m..(j + 1) * m];
                let mut acc = 0.0;
                for (k, &hk) in h.iter().enumerate() {
                    acc += row[k] * hk;
                }
                pre[j] += acc;
            }
        }
        Ok(pre.into_iter().map(sigmoid).collect())
    }

    fn layer_means(&self, state: &[Vec<f64>], layer: usize) -> Result<Vec<f64>> {
        let below = if layer > 0 {
            Some(state[layer - 1].as_slice())
        } else {
            None
        };
        let above = if layer + 1 < self.sizes.len() {
            Some(state[layer + 1].as_slice())
        } else {
            None
        };
        self.conditional(layer, below, above)
    }

    /// Alternating block Gibbs with clamped units held fixed; deterministic
    /// given the seed. Returns the final binary state and the running means
    /// of every unit over the chain.
    pub fn gibbs_chain(&self, clamp: &RbmClamp, steps: usize, seed: u64) -> Result<GibbsResult> {
        self.gibbs_chain_observed(clamp, steps, seed, |_, _| {})
    }

    /// As [`Self::gibbs_chain`], invoking `observer(parity, state)` after
    /// each half-sweep (the complementary parity is unchanged at that
    /// point, so conditional draws can be keyed by their context).
    pub fn gibbs_chain_observed(
        &self,
        clamp: &RbmClamp,
        steps: usize,
        seed: u64,
        mut observer: impl FnMut(usize, &[Vec<f64>]),
    ) -> Result<GibbsResult> {
        if steps == 0 {
            return Err(Error::config("gibbs_chain needs at least one step"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state: Vec<Vec<f64>> = self
            .sizes
            .iter()
            .enumerate()
            .map(|(l, &n)| {
                (0..n)
                    .map(|u| {
                        if clamp.mask[l][u] {
                            clamp.value[l][u]
                        } else if rng.gen::<f64>() < 0.5 {
                            1.0
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        let mut mean: Vec<Vec<f64>> = self.sizes.iter().map(|&n| vec![0.0; n]).collect();
        for step in 0..steps {
            // odd layers given even, then even given odd: each block reads
            // only the other parity
            for parity in [1usize, 0] {
                for l in (parity..self.sizes.len()).step_by(2) {
                    let means = self.layer_means(&state, l)?;
                    for u in 0..self.sizes[l] {
                        if clamp.mask[l][u] {
                            continue;
                        }
                        state[l][u] = if rng.gen::<f64>() < means[u] { 1.0 } else { 0.0 };
                    }
                }
                observer(parity, &state);
            }
            let w = 1.0 / (step + 1) as f64;
            for l in 0..self.sizes.len() {
                for u in 0..self.sizes[l] {
                    mean[l][u] += (state[l][u] - mean[l][u]) * w;
                }
            }
        }
        Ok(GibbsResult { state, mean })
    }

    /// Joint imputation and classification by damped block mean-field with
    /// the observed visible units clamped: returns the visible-layer means
    /// and the top-layer means.
    pub fn impute_and_classify(
        &self,
        observed: &[Option<f64>],
        max_iters: usize,
        tol: f64,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        if observed.len() != self.sizes[0] {
            return Err(Error::layout(format!(
                "observed vector has {} units, visible layer has {}",
                observed.len(),
                self.sizes[0]
            )));
        }
        let mut clamp = RbmClamp::none(&self.sizes);
        for (u, o) in observed.iter().enumerate() {
            if let Some(v) = o {
                clamp.clamp_unit(0, u, *v);
            }
        }
        let res = self.block_meanfield_infer(&clamp, max_iters, tol)?;
        let top = res.means[self.sizes.len() - 1].clone();
        let visible = res.means.into_iter().next().unwrap();
        Ok((visible, top))
    }

    /// One contrastive-divergence update on a batch of visible vectors,
    /// optionally with the top layer clamped to one-hot labels during the
    /// positive phase (joint modeling of pixels and digits).
    pub fn cd_k_update(
        &mut self,
        visibles: &[Vec<f64>],
        top_labels: Option<&[u8]>,
        k: usize,
        learning_rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        if k == 0 {
            return Err(Error::config("cd_k_update needs k >= 1"));
        }
        if visibles.is_empty() {
            return Ok(());
        }
        if let Some(labels) = top_labels {
            if labels.len() != visibles.len() {
                return Err(Error::layout("label count does not match batch".to_string()));
            }
        }
        let n_layers = self.sizes.len();
        let top = n_layers - 1;
        let mut dw: Vec<Vec<f64>> = self.weights.iter().map(|w| vec![0.0; w.len()]).collect();
        let mut db: Vec<Vec<f64>> = self.biases.iter().map(|b| vec![0.0; b.len()]).collect();
        let scale = 1.0 / visibles.len() as f64;

        for (bi, v) in visibles.iter().enumerate() {
            if v.len() != self.sizes[0] {
                return Err(Error::layout(format!(
                    "visible vector has {} units, layer 0 has {}",
                    v.len(),
                    self.sizes[0]
                )));
            }
            // positive phase: clamp data (and labels), sample middle layers
            // by one upward pass then one full sweep for context
            let mut state: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
            state.push(v.clone());
            for l in 1..n_layers {
                let means = self.conditional(l, Some(&state[l - 1]), None)?;
                state.push(
                    means
                        .iter()
                        .map(|&m| if rng.gen::<f64>() < m { 1.0 } else { 0.0 })
                        .collect(),
                );
            }
            if let Some(labels) = top_labels {
                let mut onehot = vec![0.0; self.sizes[top]];
                let cls = labels[bi] as usize;
                if cls >= onehot.len() {
                    return Err(Error::domain(format!("label {cls} out of range")));
                }
                onehot[cls] = 1.0;
                state[top] = onehot;
            }
            // positive statistics use means of the free layers given context
            let mut pos_means = state.clone();
            for l in 1..n_layers {
                let clamped_top = top_labels.is_some() && l == top;
                if !clamped_top {
                    pos_means[l] = self.layer_means(&state, l)?;
                }
            }
            accumulate_stats(&self.sizes, &pos_means, scale, &mut dw, &mut db);

            // negative phase: k alternating free sweeps from the positive state
            let mut neg = state;
            let mut neg_means = neg.clone();
            for _ in 0..k {
                for parity in [1usize, 0] {
                    for l in (parity..n_layers).step_by(2) {
                        let means = self.layer_means(&neg, l)?;
                        neg_means[l] = means.clone();
                        for u in 0..self.sizes[l] {
                            neg[l][u] = if rng.gen::<f64>() < means[u] { 1.0 } else { 0.0 };
                        }
                    }
                }
            }
            accumulate_stats(&self.sizes, &neg_means, -scale, &mut dw, &mut db);
        }

        for (w, d) in self.weights.iter_mut().zip(&dw) {
            if d.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("cd_k_update statistics".to_string()));
            }
            for (wi, di) in w.iter_mut().zip(d) {
                *wi += learning_rate * di;
            }
        }
        for (b, d) in self.biases.iter_mut().zip(&db) {
            for (bi, di) in b.iter_mut().zip(d) {
                *bi += learning_rate * di;
            }
        }
        Ok(())
    }

    /// Damped block mean-field: alternate layer parities updating Bernoulli
    /// means until the largest change drops below `tol`.
    pub fn block_meanfield_infer(
        &self,
        clamp: &RbmClamp,
        max_iters: usize,
        tol: f64,
    ) -> Result<MeanFieldResult> {
        let damp = 0.5;
        let mut means: Vec<Vec<f64>> = self
            .sizes
            .iter()
            .enumerate()
            .map(|(l, &n)| {
                (0..n)
                    .map(|u| {
                        if clamp.mask[l][u] {
                            clamp.value[l][u]
                        } else {
                            0.5
                        }
                    })
                    .collect()
            })
            .collect();
        let mut iterations = 0;
        let mut converged = false;
        while iterations < max_iters {
            iterations += 1;
            let mut max_change = 0.0f64;
            for parity in [1usize, 0] {
                for l in (parity..self.sizes.len()).step_by(2) {
                    let target = self.layer_means(&means, l)?;
                    for u in 0..self.sizes[l] {
                        if clamp.mask[l][u] {
                            continue;
                        }
                        let next = (1.0 - damp) * means[l][u] + damp * target[u];
                        max_change = max_change.max((next - means[l][u]).abs());
                        means[l][u] = next;
                    }
                }
            }
            if max_change <= tol {
                converged = true;
                break;
            }
        }
        Ok(MeanFieldResult {
            means,
            iterations,
            converged,
        })
    }

    /// Deterministic reconstruction error: up-pass means, down-pass means,
    /// squared distance to the input.
    pub fn reconstruction_error(&self, visibles: &[Vec<f64>]) -> Result<f64> {
        let mut acc = 0.0;
        for v in visibles {
            let h = self.conditional(1, Some(v), None)?;
            let mut state: Vec<Vec<f64>> = vec![v.clone(), h];
            for l in 2..self.sizes.len() {
                let m = self.conditional(l, Some(&state[l - 1]), None)?;
                state.push(m);
            }
            let recon = self.conditional(0, None, Some(&state[1]))?;
            acc += v
                .iter()
                .zip(&recon)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        Ok(acc / visibles.len() as f64)
    }
}

#[derive(Debug, Clone)]
pub struct GibbsResult {
    pub state: Vec<Vec<f64>>,
    pub mean: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct MeanFieldResult {
    pub means: Vec<Vec<f64>>,
    pub iterations: usize,
    pub converged: bool,
}

fn accumulate_stats(
    sizes: &[usize],
    state: &[Vec<f64>],
    scale: f64,
    dw: &mut [Vec<f64>],
    db: &mut [Vec<f64>],
) {
    for l in 0..sizes.len() - 1 {
        let (a, b) = (&state[l], &state[l + 1]);
        let w = &mut dw[l];
        let m = sizes[l + 1];
        for (i, &ai) in a.iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            let row = &mut w[i * m..(i + 1) * m];
            for (j, &bj) in b.iter().enumerate() {
                row[j] += scale * ai * bj;
            }
        }
    }
    for l in 0..sizes.len() {
        for (u, &su) in state[l].iter().enumerate() {
            db[l][u] += scale * su;
        }
    }
}

/// Exact joint distribution of a tiny RBM by enumeration (oracle).
pub fn enumerate_joint(rbm: &DeepRbm) -> Result<Vec<(Vec<Vec<f64>>, f64)>> {
    let total_units: usize = rbm.sizes.iter().sum();
    if total_units > 20 {
        return Err(Error::config("enumeration oracle limited to 20 units"));
    }
    let mut states = Vec::new();
    let mut z = 0.0;
    for bits in 0..(1usize << total_units) {
        let mut state: Vec<Vec<f64>> = Vec::new();
        let mut cursor = 0;
        for &n in &rbm.sizes {
            state.push(
                (0..n)
                    .map(|u| ((bits >> (cursor + u)) & 1) as f64)
                    .collect(),
            );
            cursor += n;
        }
        // E = -sum b.x - sum x W x
        let mut energy = 0.0;
        for l in 0..rbm.sizes.len() {
            for u in 0..rbm.sizes[l] {
                energy -= rbm.biases[l][u] * state[l][u];
            }
        }
        for l in 0..rbm.sizes.len() - 1 {
            let m = rbm.sizes[l + 1];
            for i in 0..rbm.sizes[l] {
                for j in 0..m {
                    energy -= state[l][i] * rbm.weights[l][i * m + j] * state[l + 1][j];
                }
            }
        }
        let w = (-energy).exp();
        z += w;
        states.push((state, w));
    }
    for (_, w) in states.iter_mut() {
        *w /= z;
    }
    Ok(states)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conditional_with_zero_weights_is_sigmoid_of_bias() {
        let mut rbm = DeepRbm::init(&[3, 2], 0).unwrap();
        rbm.weights[0].iter_mut().for_each(|w| *w = 0.0);
        rbm.biases[1] = vec![0.5, -1.0];
        let h = rbm.conditional(1, Some(&[1.0, 0.0, 1.0]), None).unwrap();
        assert!((h[0] - sigmoid(0.5)).abs() < 1e-15);
        assert!((h[1] - sigmoid(-1.0)).abs() < 1e-15);
    }

    #[test]
    fn conditional_matches_enumeration() {
        let mut rbm = DeepRbm::init(&[3, 2], 5).unwrap();
        // make the weights non-trivial
        for (i, w) in rbm.weights[0].iter_mut().enumerate() {
            *w = 0.3 * (i as f64 - 2.5);
        }
        rbm.biases[0] = vec![0.2, -0.4, 0.1];
        rbm.biases[1] = vec![-0.3, 0.5];
        let joint = enumerate_joint(&rbm).unwrap();
        let v = vec![1.0, 0.0, 1.0];
        // p(h_j = 1 | v) from the enumeration
        let mut pz = 0.0;
        let mut p1 = vec![0.0; 2];
        for (state, w) in &joint {
            if state[0] == v {
                pz += w;
                for j in 0..2 {
                    if state[1][j] == 1.0 {
                        p1[j] += w;
                    }
                }
            }
        }
        let got = rbm.conditional(1, Some(&v), None).unwrap();
        for j in 0..2 {
            assert!(
                (got[j] - p1[j] / pz).abs() < 1e-12,
                "unit {j}: {} vs {}",
                got[j],
                p1[j] / pz
            );
        }
    }

    #[test]
    fn conditional_symmetry() {
        let mut rbm = DeepRbm::init(&[2, 2], 0).unwrap();
        rbm.weights[0] = vec![0.7, 0.2, 0.2, 0.7];
        let h = rbm.conditional(1, Some(&[1.0, 1.0]), None).unwrap();
        assert!((h[0] - h[1]).abs() < 1e-15);
    }

    #[test]
    fn gibbs_zero_weights_matches_sigmoid_bias() {
        let mut rbm = DeepRbm::init(&[2, 2], 0).unwrap();
        rbm.weights[0].iter_mut().for_each(|w| *w = 0.0);
        rbm.biases[0] = vec![0.8, -0.6];
        rbm.biases[1] = vec![0.0, 1.2];
        let steps = 10_000;
        let res = rbm
            .gibbs_chain(&RbmClamp::none(&[2, 2]), steps, 42)
            .unwrap();
        for l in 0..2 {
            for u in 0..2 {
                let p = sigmoid(rbm.biases[l][u]);
                let sigma = (p * (1.0 - p) / steps as f64).sqrt();
                assert!(
                    (res.mean[l][u] - p).abs() < 3.0 * sigma + 1e-9,
                    "layer {l} unit {u}: {} vs {p}",
                    res.mean[l][u]
                );
            }
        }
    }

    #[test]
    fn fully_clamped_chain_is_constant() {
        let rbm = DeepRbm::init(&[2, 2], 3).unwrap();
        let mut clamp = RbmClamp::none(&[2, 2]);
        clamp.clamp_layer(0, &[1.0, 0.0]);
        clamp.clamp_layer(1, &[0.0, 1.0]);
        let res = rbm.gibbs_chain(&clamp, 50, 9).unwrap();
        assert_eq!(res.state[0], vec![1.0, 0.0]);
        assert_eq!(res.state[1], vec![0.0, 1.0]);
        assert_eq!(res.mean[0], vec![1.0, 0.0]);
    }

    #[test]
    fn cd_zero_learning_rate_is_identity() {
        let mut rbm = DeepRbm::init(&[4, 3], 1).unwrap();
        let before = rbm.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        rbm.cd_k_update(&[vec![1.0, 0.0, 1.0, 0.0]], None, 1, 0.0, &mut rng)
            .unwrap();
        assert_eq!(rbm.weights, before.weights);
        assert_eq!(rbm.biases, before.biases);
    }

    #[test]
    fn cd_reduces_reconstruction_error() {
        let mut rbm = DeepRbm::init(&[6, 4], 2).unwrap();
        let data: Vec<Vec<f64>> = vec![
            vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0],
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let before = rbm.reconstruction_error(&data).unwrap();
        for _ in 0..50 {
            rbm.cd_k_update(&data, None, 1, 0.2, &mut rng).unwrap();
        }
        let after = rbm.reconstruction_error(&data).unwrap();
        assert!(after < before, "{before} -> {after}");
    }

    #[test]
    fn block_meanfield_satisfies_its_own_updates() {
        let mut rbm = DeepRbm::init(&[3, 2], 11).unwrap();
        for (i, w) in rbm.weights[0].iter_mut().enumerate() {
            *w = 0.4 * ((i % 3) as f64 - 1.0);
        }
        let mut clamp = RbmClamp::none(&[3, 2]);
        clamp.clamp_unit(0, 0, 1.0);
        let res = rbm.block_meanfield_infer(&clamp, 2000, 1e-12).unwrap();
        assert!(res.converged);
        for l in 0..2 {
            let target = rbm.layer_means(&res.means, l).unwrap();
            for u in 0..rbm.sizes[l] {
                if clamp.mask[l][u] {
                    continue;
                }
                assert!(
                    (res.means[l][u] - target[u]).abs() < 1e-10,
                    "layer {l} unit {u}"
                );
            }
        }
    }

    #[test]
    fn block_meanfield_zero_weights_is_one_sweep() {
        let mut rbm = DeepRbm::init(&[3, 2], 0).unwrap();
        rbm.weights[0].iter_mut().for_each(|w| *w = 0.0);
        rbm.biases[0] = vec![0.4, 0.0, -0.4];
        let res = rbm
            .block_meanfield_infer(&RbmClamp::none(&[3, 2]), 500, 1e-12)
            .unwrap();
        assert!(res.converged);
        for u in 0..3 {
            assert!((res.means[0][u] - sigmoid(rbm.biases[0][u])).abs() < 1e-10);
        }
    }
}
