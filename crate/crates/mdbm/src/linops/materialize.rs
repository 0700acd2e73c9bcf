//! Dense materialization of the block operators, used as the oracle the
//! fast paths are checked against and by the monotonicity verifier.

use nalgebra::DMatrix;

use super::{BlockSpec, BlockWeights};
use crate::error::{Error, Result};

/// Default cap on the total dimension accepted by [`BlockWeights::materialize_dense`].
pub const MATERIALIZE_CAP: usize = 4096;

impl BlockWeights {
    /// Explicit `Ahat` (column scales applied).
    pub fn materialize_a(&self) -> DMatrix<f64> {
        let n = self.layout().total_len();
        let mut a = DMatrix::zeros(n, n);
        for block in self.blocks() {
            let in_off = self.layout().layer_offset(block.spec.in_layer());
            let out_off = self.layout().layer_offset(block.spec.out_layer());
            match &block.spec {
                BlockSpec::Dense { rows, cols, .. } => {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            a[(out_off + r, in_off + c)] += block.weights[r * cols + c];
                        }
                    }
                }
                BlockSpec::Conv2d {
                    in_layer,
                    out_layer,
                    out_channels,
                    in_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let il = &self.layout().layers()[*in_layer];
                    let ol = &self.layout().layers()[*out_layer];
                    let (r, s, p) = (*kernel, *stride, *padding);
                    for oc in 0..*out_channels {
                        for oy in 0..ol.height {
                            for ox in 0..ol.width {
                                for ic in 0..*in_channels {
                                    for dy in 0..r {
                                        let iy = (oy * s + dy) as isize - p as isize;
                                        if iy < 0 || iy as usize >= il.height {
                                            continue;
                                        }
                                        for dx in 0..r {
                                            let ix = (ox * s + dx) as isize - p as isize;
                                            if ix < 0 || ix as usize >= il.width {
                                                continue;
                                            }
                                            let row = out_off + (oc * ol.height + oy) * ol.width + ox;
                                            let col = in_off
                                                + (ic * il.height + iy as usize) * il.width
                                                + ix as usize;
                                            a[(row, col)] += block.weights
                                                [(oc * in_channels + ic) * r * r + dy * r + dx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        // column scaling realizes the per-variable normalization
        let batchless = self.scale();
        self.layout().for_each_var(|v, layer, coord0, stride| {
            let c = batchless[v];
            if c == 1.0 {
                return;
            }
            let k = self.layout().layers()[layer].cardinality();
            for j in 0..k {
                let col = coord0 + j * stride;
                for r in 0..n {
                    a[(r, col)] *= c;
                }
            }
        });
        a
    }

    /// Explicit `Phi` with exactly zero diagonal blocks. Refuses dimensions
    /// above [`MATERIALIZE_CAP`]; use [`Self::materialize_dense_with_cap`]
    /// to override.
    pub fn materialize_dense(&self) -> Result<DMatrix<f64>> {
        self.materialize_dense_with_cap(MATERIALIZE_CAP)
    }

    pub fn materialize_dense_with_cap(&self, cap: usize) -> Result<DMatrix<f64>> {
        let n = self.layout().total_len();
        if n > cap {
            return Err(Error::config(format!(
                "materialize_dense refused: dimension {n} exceeds cap {cap}"
            )));
        }
        let a = self.materialize_a();
        let g = a.tr_mul(&a);
        let mut phi = -g;
        // zero the per-variable diagonal blocks exactly
        self.layout().for_each_var(|v, layer, coord0, stride| {
            let _ = v;
            let k = self.layout().layers()[layer].cardinality();
            for j1 in 0..k {
                for j2 in 0..k {
                    phi[(coord0 + j1 * stride, coord0 + j2 * stride)] = 0.0;
                }
            }
        });
        // make symmetry bitwise
        for i in 0..n {
            for j in (i + 1)..n {
                let v = phi[(i, j)];
                phi[(j, i)] = v;
            }
        }
        Ok(phi)
    }

    /// Smallest eigenvalue of `I - Phi` and whether it clears the margin
    /// (`lambda_min >= m - 1e-6`).
    pub fn verify_monotone(&self) -> Result<(f64, bool)> {
        let phi = self.materialize_dense()?;
        let n = phi.nrows();
        let mut m = -phi;
        for i in 0..n {
            m[(i, i)] += 1.0;
        }
        let eig = m.symmetric_eigenvalues();
        let lambda_min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        Ok((lambda_min, lambda_min >= self.margin() - 1e-6))
    }
}
