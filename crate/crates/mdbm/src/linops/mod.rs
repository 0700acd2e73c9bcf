//! Block-structured linear operators for the monotone, block-hollow
//! pairwise potential.
//!
//! The potential is parameterized through a block matrix `A` whose column
//! blocks are grouped per categorical variable. With `Ahat` the spectrally
//! normalized version of `A` (every per-variable column block has norm at
//! most `sqrt(1-m)`), the pairwise potential is
//!
//! ```text
//! Phi = blkdiag(Ahat^T Ahat) - Ahat^T Ahat
//! ```
//!
//! which is block hollow by construction and satisfies `I - Phi >= m I`.
//!
//! Normalization is realized as a per-variable column scale, so convolution
//! blocks keep their weight sharing: `Ahat v = A (c . v)` where `c` holds one
//! scale per variable, broadcast over that variable's cardinality slice.

mod conv;
mod grad;
mod materialize;

pub use grad::PhiGrads;
pub use materialize::MATERIALIZE_CAP;

use crate::error::{Error, Result};

/// One tier of variables: a `channels x height x width` tensor whose
/// channels are split into `groups` categorical variables per location,
/// each of cardinality `channels / groups`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LayerSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub groups: usize,
}

impl LayerSpec {
    pub fn new(channels: usize, height: usize, width: usize, groups: usize) -> Self {
        Self {
            channels,
            height,
            width,
            groups,
        }
    }

    /// Flat dense layer: `len` coordinates in `groups` variables.
    pub fn dense(len: usize, groups: usize) -> Self {
        Self::new(len, 1, 1, groups)
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cardinality of each categorical variable in this layer.
    pub fn cardinality(&self) -> usize {
        self.channels / self.groups
    }

    pub fn n_vars(&self) -> usize {
        self.groups * self.height * self.width
    }

    fn validate(&self, idx: usize) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 || self.groups == 0 {
            return Err(Error::config(format!("layer {idx} has a zero dimension")));
        }
        if self.channels % self.groups != 0 {
            return Err(Error::config(format!(
                "layer {idx}: channels {} not divisible by groups {}",
                self.channels, self.groups
            )));
        }
        Ok(())
    }
}

/// Shape of one block of `A`, mapping an input layer's coordinates into an
/// output layer's coordinate space.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum BlockSpec {
    Dense {
        in_layer: usize,
        out_layer: usize,
        rows: usize,
        cols: usize,
    },
    Conv2d {
        in_layer: usize,
        out_layer: usize,
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
}

impl BlockSpec {
    pub fn in_layer(&self) -> usize {
        match self {
            BlockSpec::Dense { in_layer, .. } | BlockSpec::Conv2d { in_layer, .. } => *in_layer,
        }
    }

    pub fn out_layer(&self) -> usize {
        match self {
            BlockSpec::Dense { out_layer, .. } | BlockSpec::Conv2d { out_layer, .. } => *out_layer,
        }
    }

    /// Number of weights in this block.
    pub fn param_len(&self) -> usize {
        match self {
            BlockSpec::Dense { rows, cols, .. } => rows * cols,
            BlockSpec::Conv2d {
                out_channels,
                in_channels,
                kernel,
                ..
            } => out_channels * in_channels * kernel * kernel,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            BlockSpec::Dense {
                in_layer,
                out_layer,
                rows,
                cols,
            } => format!("dense {rows}x{cols} (layer {in_layer} -> {out_layer})"),
            BlockSpec::Conv2d {
                in_layer,
                out_layer,
                out_channels,
                in_channels,
                kernel,
                stride,
                padding,
            } => format!(
                "conv {out_channels}x{in_channels}x{kernel}x{kernel} s{stride} p{padding} (layer {in_layer} -> {out_layer})"
            ),
        }
    }

    fn validate(&self, layers: &[LayerSpec]) -> Result<()> {
        let (il, ol) = (self.in_layer(), self.out_layer());
        if il >= layers.len() || ol >= layers.len() {
            return Err(Error::config(format!(
                "{} references a missing layer",
                self.describe()
            )));
        }
        match self {
            BlockSpec::Dense { rows, cols, .. } => {
                if *rows != layers[ol].len() || *cols != layers[il].len() {
                    return Err(Error::config(format!(
                        "{}: expected {}x{}",
                        self.describe(),
                        layers[ol].len(),
                        layers[il].len()
                    )));
                }
            }
            BlockSpec::Conv2d {
                out_channels,
                in_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                if !matches!(stride, 1 | 2 | 4) {
                    return Err(Error::config(format!(
                        "{}: stride must be 1, 2 or 4",
                        self.describe()
                    )));
                }
                if *in_channels != layers[il].channels || *out_channels != layers[ol].channels {
                    return Err(Error::config(format!(
                        "{}: channel mismatch with layers",
                        self.describe()
                    )));
                }
                let oh = conv_out_dim(layers[il].height, *kernel, *stride, *padding);
                let ow = conv_out_dim(layers[il].width, *kernel, *stride, *padding);
                if oh != Some(layers[ol].height) || ow != Some(layers[ol].width) {
                    return Err(Error::config(format!(
                        "{}: output grid {:?}x{:?} does not match layer {} ({}x{})",
                        self.describe(),
                        oh,
                        ow,
                        ol,
                        layers[ol].height,
                        layers[ol].width
                    )));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    (input + 2 * padding).checked_sub(kernel).map(|v| v / stride + 1)
}

/// Coordinate layout shared by every vector exchanged within one model:
/// layers are concatenated, each in channel-major order, and each variable's
/// cardinality slice sits at stride `height * width` within its layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupLayout {
    layers: Vec<LayerSpec>,
    layer_offsets: Vec<usize>,
    var_bases: Vec<usize>,
    total_len: usize,
    n_vars: usize,
}

impl GroupLayout {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("a model needs at least one layer"));
        }
        let mut layer_offsets = Vec::with_capacity(layers.len());
        let mut var_bases = Vec::with_capacity(layers.len());
        let mut total_len = 0;
        let mut n_vars = 0;
        for (i, l) in layers.iter().enumerate() {
            l.validate(i)?;
            layer_offsets.push(total_len);
            var_bases.push(n_vars);
            total_len += l.len();
            n_vars += l.n_vars();
        }
        Ok(Self {
            layers,
            layer_offsets,
            var_bases,
            total_len,
            n_vars,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_offset(&self, l: usize) -> usize {
        self.layer_offsets[l]
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    /// Variable id of `(layer, group, y, x)`.
    pub fn var_id(&self, layer: usize, group: usize, y: usize, x: usize) -> usize {
        let l = &self.layers[layer];
        self.var_bases[layer] + (group * l.height + y) * l.width + x
    }

    pub fn var_base(&self, layer: usize) -> usize {
        self.var_bases[layer]
    }

    /// Layer that owns variable `v`.
    pub fn layer_of_var(&self, v: usize) -> usize {
        match self.var_bases.binary_search(&v) {
            Ok(l) => l,
            Err(ins) => ins - 1,
        }
    }

    pub fn var_cardinality(&self, v: usize) -> usize {
        self.layers[self.layer_of_var(v)].cardinality()
    }

    /// Coordinate of element `j` of variable `v`.
    pub fn var_coord(&self, v: usize, j: usize) -> usize {
        let layer = self.layer_of_var(v);
        let l = &self.layers[layer];
        let local = v - self.var_bases[layer];
        let hw = l.height * l.width;
        let group = local / hw;
        let loc = local % hw;
        self.layer_offsets[layer] + (group * l.cardinality() + j) * hw + loc
    }

    pub fn var_coords(&self, v: usize) -> Vec<usize> {
        (0..self.var_cardinality(v))
            .map(|j| self.var_coord(v, j))
            .collect()
    }

    /// Visit every variable as `(var_id, layer, coord_of_element_0, stride)`;
    /// element `j` of the variable lives at `coord0 + j * stride`.
    pub fn for_each_var(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        for (layer, l) in self.layers.iter().enumerate() {
            let hw = l.height * l.width;
            let k = l.cardinality();
            let base = self.layer_offsets[layer];
            let mut v = self.var_bases[layer];
            for g in 0..l.groups {
                for loc in 0..hw {
                    f(v, layer, base + g * k * hw + loc, hw);
                    v += 1;
                }
            }
        }
    }
}

/// A batch of grouped vectors in the layout above, stored coordinate-major
/// with the batch index contiguous: entry `(coord, b)` is `data[coord * batch + b]`.
/// A single grouped vector is a batch of one.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedBatch {
    pub data: Vec<f64>,
    dim: usize,
    batch: usize,
}

impl GroupedBatch {
    pub fn zeros(dim: usize, batch: usize) -> Self {
        Self {
            data: vec![0.0; dim * batch],
            dim,
            batch,
        }
    }

    pub fn from_vec(data: Vec<f64>, dim: usize, batch: usize) -> Self {
        assert_eq!(data.len(), dim * batch);
        Self { data, dim, batch }
    }

    pub fn single(data: Vec<f64>) -> Self {
        let dim = data.len();
        Self {
            data,
            dim,
            batch: 1,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    #[inline]
    pub fn row(&self, coord: usize) -> &[f64] {
        &self.data[coord * self.batch..(coord + 1) * self.batch]
    }

    #[inline]
    pub fn row_mut(&mut self, coord: usize) -> &mut [f64] {
        &mut self.data[coord * self.batch..(coord + 1) * self.batch]
    }

    /// Extract one sample as a flat vector.
    pub fn column(&self, b: usize) -> Vec<f64> {
        (0..self.dim).map(|c| self.data[c * self.batch + b]).collect()
    }

    pub fn set_column(&mut self, b: usize, v: &[f64]) {
        assert_eq!(v.len(), self.dim);
        for (c, val) in v.iter().enumerate() {
            self.data[c * self.batch + b] = *val;
        }
    }

    /// Pack single vectors into one batch.
    pub fn pack(columns: &[Vec<f64>]) -> Self {
        let batch = columns.len();
        let dim = columns[0].len();
        let mut out = Self::zeros(dim, batch);
        for (b, col) in columns.iter().enumerate() {
            out.set_column(b, col);
        }
        out
    }
}

/// One block of `A` with its raw weights.
#[derive(Debug, Clone)]
pub struct Block {
    pub spec: BlockSpec,
    pub weights: Vec<f64>,
}

/// The raw blocks of `A` plus everything derived from them: per-variable
/// Gram matrices of the raw column blocks, their top eigenpairs, and the
/// per-variable normalization scales.
#[derive(Debug, Clone)]
pub struct BlockWeights {
    layout: GroupLayout,
    blocks: Vec<Block>,
    margin: f64,
    /// Per-variable column scale; all ones when unnormalized.
    scale: Vec<f64>,
    /// Per-variable raw Gram matrices (k x k each), concatenated.
    grams: Vec<f64>,
    gram_offsets: Vec<usize>,
    /// Per-variable spectral norm of the raw column block.
    sigma: Vec<f64>,
    /// Per-variable top eigenvector of the raw Gram, concatenated.
    top_vec: Vec<f64>,
    top_offsets: Vec<usize>,
    /// Whether the scales currently realize the spectral normalization.
    normalized: bool,
}

impl BlockWeights {
    pub fn new(
        layers: Vec<LayerSpec>,
        blocks: Vec<(BlockSpec, Vec<f64>)>,
        margin: f64,
    ) -> Result<Self> {
        if !(margin > 0.0 && margin < 1.0) {
            return Err(Error::config(format!(
                "monotonicity margin must lie in (0,1), got {margin}"
            )));
        }
        let layout = GroupLayout::new(layers)?;
        let mut built = Vec::with_capacity(blocks.len());
        for (spec, weights) in blocks {
            spec.validate(layout.layers())?;
            if weights.len() != spec.param_len() {
                return Err(Error::config(format!(
                    "{}: expected {} weights, got {}",
                    spec.describe(),
                    spec.param_len(),
                    weights.len()
                )));
            }
            built.push(Block { spec, weights });
        }
        let n_vars = layout.n_vars();
        let mut gram_offsets = Vec::with_capacity(n_vars + 1);
        let mut top_offsets = Vec::with_capacity(n_vars + 1);
        let mut go = 0;
        let mut to = 0;
        for v in 0..n_vars {
            gram_offsets.push(go);
            top_offsets.push(to);
            let k = layout.var_cardinality(v);
            go += k * k;
            to += k;
        }
        gram_offsets.push(go);
        top_offsets.push(to);
        let mut w = Self {
            scale: vec![1.0; n_vars],
            grams: vec![0.0; go],
            sigma: vec![0.0; n_vars],
            top_vec: vec![0.0; to],
            gram_offsets,
            top_offsets,
            layout,
            blocks: built,
            margin,
            normalized: false,
        };
        w.refresh()?;
        Ok(w)
    }

    pub fn layout(&self) -> &GroupLayout {
        &self.layout
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    #[cfg(test)]
    pub(crate) fn set_scale_for_tests(&mut self, v: usize, val: f64) {
        self.scale[v] = val;
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub(crate) fn gram(&self, v: usize) -> &[f64] {
        &self.grams[self.gram_offsets[v]..self.gram_offsets[v + 1]]
    }

    pub(crate) fn top_eigvec(&self, v: usize) -> &[f64] {
        &self.top_vec[self.top_offsets[v]..self.top_offsets[v + 1]]
    }

    /// Overwrite block weights (same shapes) and recompute derived state.
    /// Normalization scales are reset; call [`Self::normalize_in_place`]
    /// afterwards to re-enable monotonicity.
    pub fn set_block_weights(&mut self, new_weights: &[Vec<f64>]) -> Result<()> {
        if new_weights.len() != self.blocks.len() {
            return Err(Error::config("block count mismatch in set_block_weights"));
        }
        for (block, w) in self.blocks.iter_mut().zip(new_weights) {
            if w.len() != block.weights.len() {
                return Err(Error::config(format!(
                    "{}: weight length mismatch",
                    block.spec.describe()
                )));
            }
            block.weights.copy_from_slice(w);
        }
        self.scale.iter_mut().for_each(|s| *s = 1.0);
        self.refresh()
    }

    /// Apply a parameter update in place (used by the optimizer), then
    /// recompute derived state, re-normalizing when requested.
    pub fn update_blocks(
        &mut self,
        normalize: bool,
        mut f: impl FnMut(usize, &mut [f64]),
    ) -> Result<()> {
        for (i, block) in self.blocks.iter_mut().enumerate() {
            f(i, &mut block.weights);
        }
        self.scale.iter_mut().for_each(|s| *s = 1.0);
        if normalize {
            self.normalize_in_place()
        } else {
            self.refresh()
        }
    }

    fn check_finite(&self) -> Result<()> {
        for block in &self.blocks {
            if block.weights.iter().any(|w| !w.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "weights of {}",
                    block.spec.describe()
                )));
            }
        }
        Ok(())
    }

    /// Recompute the per-variable raw Gram matrices and their top
    /// eigenpairs from the current block weights.
    fn refresh(&mut self) -> Result<()> {
        self.check_finite()?;
        self.normalized = false;
        self.grams.iter_mut().for_each(|g| *g = 0.0);
        for bi in 0..self.blocks.len() {
            self.accumulate_block_gram(bi);
        }
        for v in 0..self.layout.n_vars() {
            let k = self.layout.var_cardinality(v);
            let (lam, vec, converged) = sym_power_iter(self.gram(v), k);
            let (lam, vec) = if converged {
                (lam, vec)
            } else {
                // nearly degenerate top eigenvalue: the gradient through the
                // scale needs an accurate eigenvector, so solve the small
                // problem exactly
                sym_eig_max(self.gram(v), k)
            };
            self.sigma[v] = lam.max(0.0).sqrt();
            let off = self.top_offsets[v];
            self.top_vec[off..off + k].copy_from_slice(&vec);
        }
        Ok(())
    }

    fn accumulate_block_gram(&mut self, bi: usize) {
        let layout = self.layout.clone();
        let spec = self.blocks[bi].spec.clone();
        let in_layer = spec.in_layer();
        let l = layout.layers()[in_layer].clone();
        let k = l.cardinality();
        match spec {
            BlockSpec::Dense { rows, .. } => {
                let weights = &self.blocks[bi].weights;
                let cols = layout.layers()[in_layer].len();
                let mut contrib = vec![0.0; layout.layers()[in_layer].n_vars() * k * k];
                for (vi, v) in (layout.var_base(in_layer)
                    ..layout.var_base(in_layer) + l.n_vars())
                    .enumerate()
                {
                    let coords: Vec<usize> = (0..k)
                        .map(|j| layout.var_coord(v, j) - layout.layer_offset(in_layer))
                        .collect();
                    let g = &mut contrib[vi * k * k..(vi + 1) * k * k];
                    for r in 0..rows {
                        let row = &weights[r * cols..(r + 1) * cols];
                        for j1 in 0..k {
                            let a = row[coords[j1]];
                            if a == 0.0 {
                                continue;
                            }
                            for j2 in 0..k {
                                g[j1 * k + j2] += a * row[coords[j2]];
                            }
                        }
                    }
                }
                for (vi, v) in (layout.var_base(in_layer)
                    ..layout.var_base(in_layer) + l.n_vars())
                    .enumerate()
                {
                    let off = self.gram_offsets[v];
                    for e in 0..k * k {
                        self.grams[off + e] += contrib[vi * k * k + e];
                    }
                }
            }
            BlockSpec::Conv2d {
                out_layer,
                out_channels,
                in_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                // per-tap Gram over output channels, then scattered onto the
                // input locations each tap touches; this handles stride and
                // boundary clipping uniformly
                let weights = self.blocks[bi].weights.clone();
                let (oh, ow) = (
                    layout.layers()[out_layer].height,
                    layout.layers()[out_layer].width,
                );
                let groups = l.groups;
                let mut tap_gram = vec![0.0; kernel * kernel * groups * k * k];
                for dy in 0..kernel {
                    for dx in 0..kernel {
                        for g in 0..groups {
                            let tg = &mut tap_gram[(((dy * kernel + dx) * groups) + g)
                                * k
                                * k..][..k * k];
                            for oc in 0..out_channels {
                                let kbase = (oc * in_channels + g * k) * kernel * kernel
                                    + dy * kernel
                                    + dx;
                                for j1 in 0..k {
                                    let a = weights[kbase + j1 * kernel * kernel];
                                    if a == 0.0 {
                                        continue;
                                    }
                                    for j2 in 0..k {
                                        tg[j1 * k + j2] +=
                                            a * weights[kbase + j2 * kernel * kernel];
                                    }
                                }
                            }
                        }
                    }
                }
                for oy in 0..oh {
                    for dy in 0..kernel {
                        let iy = (oy * stride + dy) as isize - padding as isize;
                        if iy < 0 || iy as usize >= l.height {
                            continue;
                        }
                        for ox in 0..ow {
                            for dx in 0..kernel {
                                let ix = (ox * stride + dx) as isize - padding as isize;
                                if ix < 0 || ix as usize >= l.width {
                                    continue;
                                }
                                for g in 0..groups {
                                    let v =
                                        layout.var_id(in_layer, g, iy as usize, ix as usize);
                                    let off = self.gram_offsets[v];
                                    let tg = &tap_gram[(((dy * kernel + dx) * groups) + g)
                                        * k
                                        * k..][..k * k];
                                    for e in 0..k * k {
                                        self.grams[off + e] += tg[e];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Spectral normalization: scale every variable's column block so its
    /// norm is at most `sqrt(1 - m)`. Idempotent, since scales are always
    /// recomputed from the raw blocks.
    pub fn spectral_normalize(&self) -> Result<BlockWeights> {
        let mut out = self.clone();
        out.normalize_in_place()?;
        Ok(out)
    }

    pub fn normalize_in_place(&mut self) -> Result<()> {
        self.refresh()?;
        let target = (1.0 - self.margin).sqrt();
        for v in 0..self.layout.n_vars() {
            let s = self.sigma[v];
            self.scale[v] = if s > 0.0 { (target / s).min(1.0) } else { 1.0 };
        }
        self.normalized = true;
        Ok(())
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Whether variable `v`'s normalization clamp is active, i.e. its scale
    /// is actually a function of the weights (needed when chaining gradients
    /// through the scale).
    pub(crate) fn scale_active(&self, v: usize) -> bool {
        let target = (1.0 - self.margin).sqrt();
        self.normalized && self.sigma[v] >= target
    }

    fn check_layout(&self, q: &GroupedBatch, what: &str) -> Result<()> {
        if q.dim() != self.layout.total_len() {
            return Err(Error::layout(format!(
                "{what}: vector has {} coordinates, layout expects {} ({} layers: {:?})",
                q.dim(),
                self.layout.total_len(),
                self.layout.n_layers(),
                self.layout
                    .layers()
                    .iter()
                    .map(|l| l.len())
                    .collect::<Vec<_>>()
            )));
        }
        Ok(())
    }

    /// Scale a copy of `q` by the per-variable column scales.
    fn scaled(&self, q: &GroupedBatch) -> GroupedBatch {
        let mut out = q.clone();
        self.scale_rows(&mut out);
        out
    }

    fn scale_rows(&self, q: &mut GroupedBatch) {
        let batch = q.batch();
        self.layout.for_each_var(|v, layer, coord0, stride| {
            let c = self.scale[v];
            if c == 1.0 {
                return;
            }
            let k = self.layout.layers()[layer].cardinality();
            for j in 0..k {
                let base = (coord0 + j * stride) * batch;
                for e in &mut q.data[base..base + batch] {
                    *e *= c;
                }
            }
        });
    }

    /// `Ahat q`: forward application of every block to the scaled input.
    pub fn apply_a(&self, q: &GroupedBatch) -> Result<GroupedBatch> {
        self.check_layout(q, "apply_a")?;
        let qs = self.scaled(q);
        let mut out = GroupedBatch::zeros(self.layout.total_len(), q.batch());
        for block in &self.blocks {
            conv::block_forward(block, &self.layout, &qs, &mut out);
        }
        Ok(out)
    }

    /// `Ahat^T t`.
    pub fn apply_at(&self, t: &GroupedBatch) -> Result<GroupedBatch> {
        let mut out = self.apply_at_raw(t)?;
        self.scale_rows(&mut out);
        Ok(out)
    }

    /// `A^T t` without the final per-variable scaling (used by the
    /// gradient assembly).
    pub fn apply_at_raw(&self, t: &GroupedBatch) -> Result<GroupedBatch> {
        self.check_layout(t, "apply_at")?;
        let mut out = GroupedBatch::zeros(self.layout.total_len(), t.batch());
        for block in &self.blocks {
            conv::block_transpose(block, &self.layout, t, &mut out);
        }
        Ok(out)
    }

    /// `blkdiag(Ahat^T Ahat) q`: the per-variable diagonal correction,
    /// computed from the cached Gram matrices.
    pub fn block_diag_apply(&self, q: &GroupedBatch) -> Result<GroupedBatch> {
        self.check_layout(q, "block_diag_apply")?;
        let batch = q.batch();
        let mut out = GroupedBatch::zeros(self.layout.total_len(), batch);
        let mut acc = vec![0.0; batch];
        self.layout.for_each_var(|v, layer, coord0, stride| {
            let k = self.layout.layers()[layer].cardinality();
            let c2 = self.scale[v] * self.scale[v];
            let gram = self.gram(v);
            for j1 in 0..k {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for j2 in 0..k {
                    let g = gram[j1 * k + j2];
                    if g == 0.0 {
                        continue;
                    }
                    let row = q.row(coord0 + j2 * stride);
                    for (a, x) in acc.iter_mut().zip(row) {
                        *a += g * x;
                    }
                }
                let dst = out.row_mut(coord0 + j1 * stride);
                for (d, a) in dst.iter_mut().zip(&acc) {
                    *d = c2 * a;
                }
            }
        });
        Ok(out)
    }

    /// `Phi q = blkdiag(Ahat^T Ahat) q - Ahat^T (Ahat q)`.
    pub fn apply_phi(&self, q: &GroupedBatch) -> Result<GroupedBatch> {
        let t = self.apply_a(q)?;
        let full = self.apply_at(&t)?;
        let mut out = self.block_diag_apply(q)?;
        for (o, f) in out.data.iter_mut().zip(&full.data) {
            *o -= f;
        }
        Ok(out)
    }
}

/// Deterministic symmetric power iteration: all-ones start, at most 100
/// iterations, stop when the iterate moves by less than 1e-10. Returns
/// `(lambda_max, unit eigenvector, converged)`; the eigenvector feeds the
/// normalization gradient, so the stop rule is on the vector, not the value.
pub(crate) fn sym_power_iter(m: &[f64], k: usize) -> (f64, Vec<f64>, bool) {
    debug_assert_eq!(m.len(), k * k);
    let mut v = vec![1.0 / (k as f64).sqrt(); k];
    let mut w = vec![0.0; k];
    let mut converged = false;
    for _ in 0..100 {
        for i in 0..k {
            w[i] = (0..k).map(|j| m[i * k + j] * v[j]).sum();
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return (0.0, v, true);
        }
        let mut delta = 0.0f64;
        for i in 0..k {
            let next = w[i] / norm;
            delta = delta.max((next - v[i]).abs());
            v[i] = next;
        }
        if delta <= 1e-10 {
            converged = true;
            break;
        }
    }
    // Rayleigh quotient on the final vector
    for i in 0..k {
        w[i] = (0..k).map(|j| m[i * k + j] * v[j]).sum();
    }
    let lambda = v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
    (lambda.max(0.0), v, converged)
}

/// Exact top eigenpair of a small symmetric matrix.
fn sym_eig_max(m: &[f64], k: usize) -> (f64, Vec<f64>) {
    let mat = nalgebra::DMatrix::from_row_slice(k, k, m);
    let eig = nalgebra::SymmetricEigen::new(mat);
    let mut best = 0;
    for i in 1..k {
        if eig.eigenvalues[i] > eig.eigenvalues[best] {
            best = i;
        }
    }
    (
        eig.eigenvalues[best],
        eig.eigenvectors.column(best).iter().cloned().collect(),
    )
}

#[cfg(test)]
mod tests;
