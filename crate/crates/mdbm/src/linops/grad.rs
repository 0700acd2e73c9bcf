//! Gradients of bilinear forms in the potential: given full-length vectors
//! `w` and `q`, accumulate `d/dA [ coeff * sum_b w_b^T Phi(A) q_b ]` into
//! per-block weight gradients, treating the normalization scales `c(A)`
//! first as constants and collecting `d/dc` separately; the scale chain is
//! applied once at the end via [`BlockWeights::chain_scale_grad`].

use super::{conv, BlockSpec, BlockWeights, GroupedBatch};
use crate::error::Result;

/// Gradient accumulators shaped like the parameterization.
#[derive(Debug, Clone)]
pub struct PhiGrads {
    /// One gradient buffer per block, same length as the block weights.
    pub blocks: Vec<Vec<f64>>,
    /// Gradient with respect to the per-variable column scales.
    pub scale: Vec<f64>,
}

impl PhiGrads {
    pub fn zeros_like(w: &BlockWeights) -> Self {
        Self {
            blocks: w
                .blocks()
                .iter()
                .map(|b| vec![0.0; b.weights.len()])
                .collect(),
            scale: vec![0.0; w.layout().n_vars()],
        }
    }

    pub fn scaled_add(&mut self, other: &PhiGrads, factor: f64) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += factor * y;
            }
        }
        for (x, y) in self.scale.iter_mut().zip(&other.scale) {
            *x += factor * y;
        }
    }
}

impl BlockWeights {
    /// Accumulate `coeff * d/dA [ sum_b w_b^T Phi q_b ]` into `grads`.
    ///
    /// `Phi q = blkdiag(Ahat^T Ahat) q - Ahat^T Ahat q`, so the gradient has
    /// a per-variable diagonal part and a full bilinear part; both also
    /// produce `d/dc` terms for the column scales.
    pub fn accumulate_phi_bilinear_grad(
        &self,
        w: &GroupedBatch,
        q: &GroupedBatch,
        coeff: f64,
        grads: &mut PhiGrads,
    ) -> Result<()> {
        let batch = w.batch();
        // ---- full term: -d <A(cw), A(cq)> ----
        let t_q = self.apply_a(q)?;
        let t_w = self.apply_a(w)?;
        let ws = self.scaled(w);
        let qs = self.scaled(q);
        for (block, grad) in self.blocks().iter().zip(grads.blocks.iter_mut()) {
            conv::block_weight_grad(block, self.layout(), &ws, &t_q, -coeff, grad);
            conv::block_weight_grad(block, self.layout(), &qs, &t_w, -coeff, grad);
        }
        // d/dc of -<A(cw), A(cq)>: -(A^T t_q) . w - (A^T t_w) . q per coordinate
        let r_q = self.apply_at_raw(&t_q)?;
        let r_w = self.apply_at_raw(&t_w)?;
        self.layout().for_each_var(|v, layer, coord0, stride| {
            let k = self.layout().layers()[layer].cardinality();
            let mut acc = 0.0;
            for j in 0..k {
                let c = coord0 + j * stride;
                let (rq, rw) = (r_q.row(c), r_w.row(c));
                let (wr, qr) = (w.row(c), q.row(c));
                for b in 0..batch {
                    acc += rq[b] * wr[b] + rw[b] * qr[b];
                }
            }
            grads.scale[v] -= coeff * acc;
        });

        // ---- diagonal term: +d sum_v c_v^2 w_v^T Gram_v q_v ----
        self.accumulate_diag_bilinear_grad(w, q, coeff, grads);
        Ok(())
    }

    fn accumulate_diag_bilinear_grad(
        &self,
        w: &GroupedBatch,
        q: &GroupedBatch,
        coeff: f64,
        grads: &mut PhiGrads,
    ) {
        let batch = w.batch();
        // d/dc_v: 2 c_v * w_v^T Gram_v q_v
        self.layout().for_each_var(|v, layer, coord0, stride| {
            let k = self.layout().layers()[layer].cardinality();
            let gram = self.gram(v);
            let c = self.scale()[v];
            let mut acc = 0.0;
            for j1 in 0..k {
                let wr = w.row(coord0 + j1 * stride);
                for j2 in 0..k {
                    let g = gram[j1 * k + j2];
                    if g == 0.0 {
                        continue;
                    }
                    let qr = q.row(coord0 + j2 * stride);
                    let dot: f64 = wr.iter().zip(qr).map(|(a, b)| a * b).sum();
                    acc += g * dot;
                }
            }
            grads.scale[v] += coeff * 2.0 * c * acc;
        });

        // d/dW per block: each kernel tap (or dense column entry) enters the
        // Gram of every input location it touches
        for (bi, block) in self.blocks().iter().enumerate() {
            let in_layer = block.spec.in_layer();
            let l = self.layout().layers()[in_layer].clone();
            let k = l.cardinality();
            let grad = &mut grads.blocks[bi];
            match &block.spec {
                BlockSpec::Dense { rows, cols, .. } => {
                    let weights = &block.weights;
                    let base = self.layout().layer_offset(in_layer);
                    for (vi, v) in (self.layout().var_base(in_layer)
                        ..self.layout().var_base(in_layer) + l.n_vars())
                        .enumerate()
                    {
                        let _ = vi;
                        let c2 = self.scale()[v] * self.scale()[v];
                        let coords: Vec<usize> = (0..k)
                            .map(|j| self.layout().var_coord(v, j))
                            .collect();
                        // per-batch u_q = T q_v, u_w = T w_v with T the
                        // rows x k column slice of the dense block
                        for b in 0..batch {
                            let qv: Vec<f64> = coords.iter().map(|&c| q.row(c)[b]).collect();
                            let wv: Vec<f64> = coords.iter().map(|&c| w.row(c)[b]).collect();
                            for r in 0..*rows {
                                let row = &weights[r * cols..(r + 1) * cols];
                                let mut uq = 0.0;
                                let mut uw = 0.0;
                                for j in 0..k {
                                    let col = coords[j] - base;
                                    uq += row[col] * qv[j];
                                    uw += row[col] * wv[j];
                                }
                                for j in 0..k {
                                    let col = coords[j] - base;
                                    grad[r * cols + col] +=
                                        coeff * c2 * (uq * wv[j] + uw * qv[j]);
                                }
                            }
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
                    let ol = &self.layout().layers()[*out_layer];
                    let (r, s, p) = (*kernel, *stride, *padding);
                    let weights = &block.weights;
                    let base = self.layout().layer_offset(in_layer);
                    let hw = l.height * l.width;
                    // per input location: gather the (k x batch) slices of
                    // q and w once, then accumulate every valid tap
                    let mut taps: Vec<usize> = Vec::with_capacity(r * r);
                    let mut qbuf = vec![0.0f64; k * batch];
                    let mut wbuf = vec![0.0f64; k * batch];
                    let mut uq = vec![0.0f64; batch];
                    let mut uw = vec![0.0f64; batch];
                    for iy in 0..l.height {
                        for ix in 0..l.width {
                            taps.clear();
                            for dy in 0..r {
                                let oy_num = iy + p;
                                if oy_num < dy || (oy_num - dy) % s != 0 {
                                    continue;
                                }
                                let oy = (oy_num - dy) / s;
                                if oy >= ol.height {
                                    continue;
                                }
                                for dx in 0..r {
                                    let ox_num = ix + p;
                                    if ox_num < dx || (ox_num - dx) % s != 0 {
                                        continue;
                                    }
                                    let ox = (ox_num - dx) / s;
                                    if ox >= ol.width {
                                        continue;
                                    }
                                    taps.push(dy * r + dx);
                                }
                            }
                            if taps.is_empty() {
                                continue;
                            }
                            let loc = iy * l.width + ix;
                            for g in 0..l.groups {
                                let v = self.layout().var_id(in_layer, g, iy, ix);
                                let c2 = coeff * self.scale()[v] * self.scale()[v];
                                let coord0 = base + g * k * hw + loc;
                                for j in 0..k {
                                    qbuf[j * batch..(j + 1) * batch]
                                        .copy_from_slice(q.row(coord0 + j * hw));
                                    wbuf[j * batch..(j + 1) * batch]
                                        .copy_from_slice(w.row(coord0 + j * hw));
                                }
                                for &tap in &taps {
                                    for oc in 0..*out_channels {
                                        let kb = (oc * in_channels + g * k) * r * r + tap;
                                        uq.iter_mut().for_each(|x| *x = 0.0);
                                        uw.iter_mut().for_each(|x| *x = 0.0);
                                        for j in 0..k {
                                            let kv = weights[kb + j * r * r];
                                            let (qr, wr) = (
                                                &qbuf[j * batch..(j + 1) * batch],
                                                &wbuf[j * batch..(j + 1) * batch],
                                            );
                                            for b in 0..batch {
                                                uq[b] += kv * qr[b];
                                                uw[b] += kv * wr[b];
                                            }
                                        }
                                        for j in 0..k {
                                            let (qr, wr) = (
                                                &qbuf[j * batch..(j + 1) * batch],
                                                &wbuf[j * batch..(j + 1) * batch],
                                            );
                                            let mut acc = 0.0;
                                            for b in 0..batch {
                                                acc += uq[b] * wr[b] + uw[b] * qr[b];
                                            }
                                            grad[kb + j * r * r] += c2 * acc;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Fold the accumulated `d/dc` terms into the block gradients through
    /// `c_v = min(sqrt(1-m)/sigma_v, 1)`. Inactive clamps contribute
    /// nothing; at the boundary the scaling branch's derivative is used.
    pub fn chain_scale_grad(&self, grads: &mut PhiGrads) {
        // dc_v/dW = -(c_v / sigma_v^2) * (T v1) v1^T per tap touching v
        let n_vars = self.layout().n_vars();
        let mut factor = vec![0.0f64; n_vars];
        let mut any = false;
        for v in 0..n_vars {
            if self.scale_active(v) && self.sigma()[v] > 0.0 {
                factor[v] = -grads.scale[v] * self.scale()[v] / (self.sigma()[v] * self.sigma()[v]);
                if factor[v] != 0.0 {
                    any = true;
                }
            }
        }
        if !any {
            return;
        }
        for (bi, block) in self.blocks().iter().enumerate() {
            let in_layer = block.spec.in_layer();
            let l = self.layout().layers()[in_layer].clone();
            let k = l.cardinality();
            let grad = &mut grads.blocks[bi];
            match &block.spec {
                BlockSpec::Dense { rows, cols, .. } => {
                    let weights = &block.weights;
                    let base = self.layout().layer_offset(in_layer);
                    for v in self.layout().var_base(in_layer)
                        ..self.layout().var_base(in_layer) + l.n_vars()
                    {
                        if factor[v] == 0.0 {
                            continue;
                        }
                        let v1 = self.top_eigvec(v);
                        let coords: Vec<usize> = (0..k)
                            .map(|j| self.layout().var_coord(v, j) - base)
                            .collect();
                        for r in 0..*rows {
                            let row = &weights[r * cols..(r + 1) * cols];
                            let tv: f64 = (0..k).map(|j| row[coords[j]] * v1[j]).sum();
                            if tv == 0.0 {
                                continue;
                            }
                            for j in 0..k {
                                grad[r * cols + coords[j]] += factor[v] * tv * v1[j];
                            }
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
                    let ol = &self.layout().layers()[*out_layer];
                    let (r, s, p) = (*kernel, *stride, *padding);
                    let weights = &block.weights;
                    for oy in 0..ol.height {
                        for dy in 0..r {
                            let iy = (oy * s + dy) as isize - p as isize;
                            if iy < 0 || iy as usize >= l.height {
                                continue;
                            }
                            for ox in 0..ol.width {
                                for dx in 0..r {
                                    let ix = (ox * s + dx) as isize - p as isize;
                                    if ix < 0 || ix as usize >= l.width {
                                        continue;
                                    }
                                    for g in 0..l.groups {
                                        let v = self.layout().var_id(
                                            in_layer,
                                            g,
                                            iy as usize,
                                            ix as usize,
                                        );
                                        if factor[v] == 0.0 {
                                            continue;
                                        }
                                        let v1 = self.top_eigvec(v);
                                        for oc in 0..*out_channels {
                                            let kb = (oc * in_channels + g * k) * r * r
                                                + dy * r
                                                + dx;
                                            let tv: f64 = (0..k)
                                                .map(|j| weights[kb + j * r * r] * v1[j])
                                                .sum();
                                            if tv == 0.0 {
                                                continue;
                                            }
                                            for j in 0..k {
                                                grad[kb + j * r * r] += factor[v] * tv * v1[j];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
