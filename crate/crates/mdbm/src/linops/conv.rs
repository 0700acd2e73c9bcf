//! Forward, transposed and weight-gradient application of individual
//! blocks. Everything is batched: the innermost loops run over the batch
//! index, which is contiguous in memory and processed in fixed-size chunks
//! so accumulators stay in registers.

use super::{Block, BlockSpec, GroupLayout, GroupedBatch};

const CHUNK: usize = 64;

/// Visit the batch dimension in fixed chunks plus a tail.
#[inline]
fn chunks(batch: usize) -> impl Iterator<Item = (usize, usize)> {
    let full = batch / CHUNK;
    (0..full)
        .map(move |c| (c * CHUNK, CHUNK))
        .chain(if batch % CHUNK != 0 {
            Some((full * CHUNK, batch % CHUNK))
        } else {
            None
        })
}

/// out[out_layer] += B (in[in_layer])
pub(super) fn block_forward(
    block: &Block,
    layout: &GroupLayout,
    input: &GroupedBatch,
    out: &mut GroupedBatch,
) {
    let batch = input.batch();
    let in_off = layout.layer_offset(block.spec.in_layer());
    let out_off = layout.layer_offset(block.spec.out_layer());
    match &block.spec {
        BlockSpec::Dense { rows, cols, .. } => {
            let w = &block.weights;
            for r in 0..*rows {
                let dst_base = (out_off + r) * batch;
                let row = &w[r * cols..(r + 1) * cols];
                for (c, &wv) in row.iter().enumerate() {
                    if wv == 0.0 {
                        continue;
                    }
                    let src_base = (in_off + c) * batch;
                    for b in 0..batch {
                        out.data[dst_base + b] += wv * input.data[src_base + b];
                    }
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
            let il = &layout.layers()[*in_layer];
            let ol = &layout.layers()[*out_layer];
            let (ih, iw) = (il.height, il.width);
            let (oh, ow) = (ol.height, ol.width);
            let (r, s, p) = (*kernel, *stride, *padding);
            let w = &block.weights;
            // taps gathered per output location once, reused for every
            // channel pair and batch chunk
            let mut taps: Vec<(usize, usize)> = Vec::with_capacity(r * r);
            for (c0, clen) in chunks(batch) {
                for oy in 0..oh {
                    for ox in 0..ow {
                        taps.clear();
                        for dy in 0..r {
                            let iy = (oy * s + dy) as isize - p as isize;
                            if iy < 0 || iy as usize >= ih {
                                continue;
                            }
                            for dx in 0..r {
                                let ix = (ox * s + dx) as isize - p as isize;
                                if ix < 0 || ix as usize >= iw {
                                    continue;
                                }
                                taps.push((dy * r + dx, (iy as usize) * iw + ix as usize));
                            }
                        }
                        for oc in 0..*out_channels {
                            let mut acc = [0.0f64; CHUNK];
                            for ic in 0..*in_channels {
                                let kb = (oc * in_channels + ic) * r * r;
                                let cb = (in_off + ic * ih * iw) * batch + c0;
                                for &(tap, loc) in &taps {
                                    let kv = w[kb + tap];
                                    let src = cb + loc * batch;
                                    let row = &input.data[src..src + clen];
                                    for (a, x) in acc[..clen].iter_mut().zip(row) {
                                        *a += kv * x;
                                    }
                                }
                            }
                            let dst = (out_off + (oc * oh + oy) * ow + ox) * batch + c0;
                            for (d, a) in out.data[dst..dst + clen].iter_mut().zip(&acc[..clen]) {
                                *d += a;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// out[in_layer] += B^T (t[out_layer])
pub(super) fn block_transpose(
    block: &Block,
    layout: &GroupLayout,
    t: &GroupedBatch,
    out: &mut GroupedBatch,
) {
    let batch = t.batch();
    let in_off = layout.layer_offset(block.spec.in_layer());
    let out_off = layout.layer_offset(block.spec.out_layer());
    match &block.spec {
        BlockSpec::Dense { rows, cols, .. } => {
            let w = &block.weights;
            for r in 0..*rows {
                let src_base = (out_off + r) * batch;
                let row = &w[r * cols..(r + 1) * cols];
                for (c, &wv) in row.iter().enumerate() {
                    if wv == 0.0 {
                        continue;
                    }
                    let dst_base = (in_off + c) * batch;
                    for b in 0..batch {
                        out.data[dst_base + b] += wv * t.data[src_base + b];
                    }
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
            let il = &layout.layers()[*in_layer];
            let ol = &layout.layers()[*out_layer];
            let (ih, iw) = (il.height, il.width);
            let (oh, ow) = (ol.height, ol.width);
            let (r, s, p) = (*kernel, *stride, *padding);
            let w = &block.weights;
            let mut taps: Vec<(usize, usize)> = Vec::with_capacity(r * r);
            for (c0, clen) in chunks(batch) {
                for iy in 0..ih {
                    for ix in 0..iw {
                        taps.clear();
                        for dy in 0..r {
                            let oy_num = iy + p;
                            if oy_num < dy || (oy_num - dy) % s != 0 {
                                continue;
                            }
                            let oy = (oy_num - dy) / s;
                            if oy >= oh {
                                continue;
                            }
                            for dx in 0..r {
                                let ox_num = ix + p;
                                if ox_num < dx || (ox_num - dx) % s != 0 {
                                    continue;
                                }
                                let ox = (ox_num - dx) / s;
                                if ox >= ow {
                                    continue;
                                }
                                taps.push((dy * r + dx, oy * ow + ox));
                            }
                        }
                        for ic in 0..*in_channels {
                            let mut acc = [0.0f64; CHUNK];
                            for oc in 0..*out_channels {
                                let kb = (oc * in_channels + ic) * r * r;
                                let cb = (out_off + oc * oh * ow) * batch + c0;
                                for &(tap, loc) in &taps {
                                    let kv = w[kb + tap];
                                    let src = cb + loc * batch;
                                    let row = &t.data[src..src + clen];
                                    for (a, x) in acc[..clen].iter_mut().zip(row) {
                                        *a += kv * x;
                                    }
                                }
                            }
                            let dst = (in_off + (ic * ih + iy) * iw + ix) * batch + c0;
                            for (d, a) in out.data[dst..dst + clen].iter_mut().zip(&acc[..clen]) {
                                *d += a;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// grad += coeff * d/dW [ sum_b <gout[out_layer], B input[in_layer]> ]
pub(super) fn block_weight_grad(
    block: &Block,
    layout: &GroupLayout,
    input: &GroupedBatch,
    gout: &GroupedBatch,
    coeff: f64,
    grad: &mut [f64],
) {
    let batch = input.batch();
    let in_off = layout.layer_offset(block.spec.in_layer());
    let out_off = layout.layer_offset(block.spec.out_layer());
    match &block.spec {
        BlockSpec::Dense { rows, cols, .. } => {
            for r in 0..*rows {
                let g_row = &gout.data[(out_off + r) * batch..(out_off + r + 1) * batch];
                for c in 0..*cols {
                    let i_row = &input.data[(in_off + c) * batch..(in_off + c + 1) * batch];
                    let dot: f64 = g_row.iter().zip(i_row).map(|(a, b)| a * b).sum();
                    grad[r * cols + c] += coeff * dot;
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
            let il = &layout.layers()[*in_layer];
            let ol = &layout.layers()[*out_layer];
            let (ih, iw) = (il.height, il.width);
            let (oh, ow) = (ol.height, ol.width);
            let (r, s, p) = (*kernel, *stride, *padding);
            for oc in 0..*out_channels {
                for ic in 0..*in_channels {
                    for dy in 0..r {
                        for dx in 0..r {
                            let mut acc = [0.0f64; CHUNK];
                            let mut tail = 0.0f64;
                            for oy in 0..oh {
                                let iy = (oy * s + dy) as isize - p as isize;
                                if iy < 0 || iy as usize >= ih {
                                    continue;
                                }
                                for ox in 0..ow {
                                    let ix = (ox * s + dx) as isize - p as isize;
                                    if ix < 0 || ix as usize >= iw {
                                        continue;
                                    }
                                    let g = (out_off + (oc * oh + oy) * ow + ox) * batch;
                                    let i =
                                        (in_off + (ic * ih + iy as usize) * iw + ix as usize)
                                            * batch;
                                    let gr = &gout.data[g..g + batch];
                                    let ir = &input.data[i..i + batch];
                                    let mut b = 0;
                                    while b + CHUNK <= batch {
                                        for l in 0..CHUNK {
                                            acc[l] += gr[b + l] * ir[b + l];
                                        }
                                        b += CHUNK;
                                    }
                                    while b < batch {
                                        tail += gr[b] * ir[b];
                                        b += 1;
                                    }
                                }
                            }
                            let total: f64 = acc.iter().sum::<f64>() + tail;
                            grad[(oc * in_channels + ic) * r * r + dy * r + dx] += coeff * total;
                        }
                    }
                }
            }
        }
    }
}
