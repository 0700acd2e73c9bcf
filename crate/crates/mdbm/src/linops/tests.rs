use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    use rand_distr::{Distribution, Normal};
    let d = Normal::new(0.0, scale).unwrap();
    (0..n).map(|_| d.sample(rng)).collect()
}

/// Two dense layers (2 variables of k=2, one variable of k=2) with
/// self-blocks and a cross block.
fn dense_toy(seed: u64, margin: f64) -> BlockWeights {
    let mut r = rng(seed);
    let layers = vec![LayerSpec::dense(4, 2), LayerSpec::dense(2, 1)];
    let blocks = vec![
        (
            BlockSpec::Dense {
                in_layer: 0,
                out_layer: 0,
                rows: 4,
                cols: 4,
            },
            randn(&mut r, 16, 0.8),
        ),
        (
            BlockSpec::Dense {
                in_layer: 0,
                out_layer: 1,
                rows: 2,
                cols: 4,
            },
            randn(&mut r, 8, 0.8),
        ),
        (
            BlockSpec::Dense {
                in_layer: 1,
                out_layer: 1,
                rows: 2,
                cols: 2,
            },
            randn(&mut r, 4, 0.8),
        ),
    ];
    BlockWeights::new(layers, blocks, margin).unwrap()
}

/// Conv model: 2-channel 4x4 image layer (one k=2 variable per location),
/// a stride-1 self conv, and a strided conv down to a 2x2 layer.
fn conv_toy(seed: u64, stride: usize) -> BlockWeights {
    let mut r = rng(seed);
    let down = if stride == 1 { 4 } else { 4 / stride };
    let layers = vec![
        LayerSpec::new(2, 4, 4, 1),
        LayerSpec::new(4, down, down, 2),
    ];
    let blocks = vec![
        (
            BlockSpec::Conv2d {
                in_layer: 0,
                out_layer: 0,
                out_channels: 2,
                in_channels: 2,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            randn(&mut r, 2 * 2 * 9, 0.5),
        ),
        (
            BlockSpec::Conv2d {
                in_layer: 0,
                out_layer: 1,
                out_channels: 4,
                in_channels: 2,
                kernel: 3,
                stride,
                padding: 1,
            },
            randn(&mut r, 4 * 2 * 9, 0.5),
        ),
        (
            BlockSpec::Conv2d {
                in_layer: 1,
                out_layer: 1,
                out_channels: 4,
                in_channels: 4,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            randn(&mut r, 4 * 4 * 9, 0.5),
        ),
    ];
    BlockWeights::new(layers, blocks, 0.1).unwrap()
}

#[test]
fn normalize_scaling_matches_closed_form() {
    // single variable, A = diag(2, 1): spectral norm 2, m = 0.19 forces 0.45
    let layers = vec![LayerSpec::dense(2, 1)];
    let blocks = vec![(
        BlockSpec::Dense {
            in_layer: 0,
            out_layer: 0,
            rows: 2,
            cols: 2,
        },
        vec![2.0, 0.0, 0.0, 1.0],
    )];
    let w = BlockWeights::new(layers.clone(), blocks, 0.19).unwrap();
    let n = w.spectral_normalize().unwrap();
    assert!((n.scale()[0] - 0.45).abs() < 1e-9, "scale={}", n.scale()[0]);

    // small norm is left alone
    let blocks = vec![(
        BlockSpec::Dense {
            in_layer: 0,
            out_layer: 0,
            rows: 2,
            cols: 2,
        },
        vec![0.3, 0.0, 0.0, 0.1],
    )];
    let w = BlockWeights::new(layers.clone(), blocks, 0.19).unwrap();
    assert_eq!(w.spectral_normalize().unwrap().scale()[0], 1.0);

    // zero weights stay zero
    let blocks = vec![(
        BlockSpec::Dense {
            in_layer: 0,
            out_layer: 0,
            rows: 2,
            cols: 2,
        },
        vec![0.0; 4],
    )];
    let w = BlockWeights::new(layers, blocks, 0.19).unwrap();
    assert_eq!(w.spectral_normalize().unwrap().scale()[0], 1.0);
}

#[test]
fn normalize_is_idempotent() {
    let w = dense_toy(3, 0.1).spectral_normalize().unwrap();
    let twice = w.spectral_normalize().unwrap();
    assert_eq!(w.scale(), twice.scale());
    for (a, b) in w.blocks().iter().zip(twice.blocks()) {
        assert_eq!(a.weights, b.weights);
    }
}

#[test]
fn normalize_rejects_non_finite() {
    let layers = vec![LayerSpec::dense(2, 1)];
    let blocks = vec![(
        BlockSpec::Dense {
            in_layer: 0,
            out_layer: 0,
            rows: 2,
            cols: 2,
        },
        vec![1.0, f64::NAN, 0.0, 1.0],
    )];
    let err = BlockWeights::new(layers, blocks, 0.1).unwrap_err();
    assert!(err.to_string().contains("dense 2x2"), "{err}");
}

#[test]
fn single_variable_phi_is_zero() {
    let layers = vec![LayerSpec::dense(3, 1)];
    let mut r = rng(5);
    let blocks = vec![(
        BlockSpec::Dense {
            in_layer: 0,
            out_layer: 0,
            rows: 3,
            cols: 3,
        },
        randn(&mut r, 9, 1.0),
    )];
    let w = BlockWeights::new(layers, blocks, 0.1).unwrap();
    let q = GroupedBatch::single(vec![0.3, -0.7, 2.0]);
    let out = w.apply_phi(&q).unwrap();
    for v in &out.data {
        assert!(v.abs() < 1e-12);
    }
    let phi = w.materialize_dense().unwrap();
    assert!(phi.iter().all(|&v| v == 0.0));
}

#[test]
fn hollowness_of_operator() {
    for seed in 0..5 {
        let w = conv_toy(seed, 2).spectral_normalize().unwrap();
        let n = w.layout().n_vars();
        for v in (0..n).step_by(3) {
            let mut q = GroupedBatch::zeros(w.layout().total_len(), 1);
            for (j, &c) in w.layout().var_coords(v).iter().enumerate() {
                q.data[c] = 1.0 + j as f64;
            }
            let out = w.apply_phi(&q).unwrap();
            for &c in &w.layout().var_coords(v) {
                assert!(
                    out.data[c].abs() < 1e-12,
                    "seed {seed} var {v} leaked {:.3e}",
                    out.data[c]
                );
            }
        }
    }
}

#[test]
fn operator_matches_dense_materialization() {
    for (seed, stride) in [(1u64, 1usize), (2, 2), (3, 4), (4, 2)] {
        let w = if seed == 1 {
            dense_toy(seed, 0.1).spectral_normalize().unwrap()
        } else {
            conv_toy(seed, stride).spectral_normalize().unwrap()
        };
        let n = w.layout().total_len();
        let phi = w.materialize_dense().unwrap();
        let mut r = rng(seed + 100);
        let q = GroupedBatch::single(randn(&mut r, n, 1.0));
        let fast = w.apply_phi(&q).unwrap();
        let qv = nalgebra::DVector::from_column_slice(&q.data);
        let dense = &phi * qv;
        let qmax = q.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..n {
            assert!(
                (fast.data[i] - dense[i]).abs() <= 1e-8 * qmax.max(1.0),
                "seed {seed} coord {i}: {} vs {}",
                fast.data[i],
                dense[i]
            );
        }
    }
}

#[test]
fn materialized_phi_is_symmetric_with_zero_diag_blocks() {
    let w = conv_toy(9, 2).spectral_normalize().unwrap();
    let phi = w.materialize_dense().unwrap();
    let n = phi.nrows();
    for i in 0..n {
        for j in 0..n {
            assert_eq!(phi[(i, j)], phi[(j, i)]);
        }
    }
    for v in 0..w.layout().n_vars() {
        let coords = w.layout().var_coords(v);
        for &a in &coords {
            for &b in &coords {
                assert_eq!(phi[(a, b)], 0.0);
            }
        }
    }
    // off-diagonal blocks are -Ahat_i^T Ahat_j
    let a = w.materialize_a();
    let c0 = w.layout().var_coords(0);
    let c1 = w.layout().var_coords(1);
    for (i1, &ca) in c0.iter().enumerate() {
        for (i2, &cb) in c1.iter().enumerate() {
            let _ = (i1, i2);
            let dot: f64 = (0..a.nrows()).map(|r| a[(r, ca)] * a[(r, cb)]).sum();
            assert!((phi[(ca, cb)] + dot).abs() < 1e-12);
        }
    }
}

#[test]
fn monotonicity_of_normalized_models() {
    let layers = vec![LayerSpec::dense(4, 2)];
    let blocks = vec![(
        BlockSpec::Dense {
            in_layer: 0,
            out_layer: 0,
            rows: 4,
            cols: 4,
        },
        vec![0.0; 16],
    )];
    let w = BlockWeights::new(layers, blocks, 0.3).unwrap();
    let (lam, ok) = w.verify_monotone().unwrap();
    assert!((lam - 1.0).abs() < 1e-10 && ok);

    for seed in 0..20 {
        let w = conv_toy(seed, 2).spectral_normalize().unwrap();
        let (lam, ok) = w.verify_monotone().unwrap();
        assert!(ok, "seed {seed} lambda_min {lam}");
        assert!(lam >= 0.1 - 1e-6);
    }
}

#[test]
fn unnormalized_weights_can_break_monotonicity() {
    // two k=1 variables coupled by a large weight: I - Phi has eigenvalue
    // 1 - |phi| far below the margin
    let layers = vec![LayerSpec::dense(2, 2)];
    let blocks = vec![(
        BlockSpec::Dense {
            in_layer: 0,
            out_layer: 0,
            rows: 2,
            cols: 2,
        },
        vec![5.0, 5.0, 0.0, 0.0],
    )];
    let w = BlockWeights::new(layers, blocks, 0.1).unwrap();
    let (lam, ok) = w.verify_monotone().unwrap();
    assert!(!ok, "lambda_min {lam} should violate the margin");
}

#[test]
fn adjointness_of_apply_a() {
    let w = conv_toy(11, 4).spectral_normalize().unwrap();
    let n = w.layout().total_len();
    let mut r = rng(42);
    let q = GroupedBatch::single(randn(&mut r, n, 1.0));
    let t = GroupedBatch::single(randn(&mut r, n, 1.0));
    let aq = w.apply_a(&q).unwrap();
    let att = w.apply_at(&t).unwrap();
    let lhs: f64 = aq.data.iter().zip(&t.data).map(|(a, b)| a * b).sum();
    let rhs: f64 = q.data.iter().zip(&att.data).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
}

#[test]
fn batched_apply_matches_per_sample() {
    let w = conv_toy(13, 2).spectral_normalize().unwrap();
    let n = w.layout().total_len();
    let mut r = rng(77);
    let cols: Vec<Vec<f64>> = (0..5).map(|_| randn(&mut r, n, 1.0)).collect();
    let batch = GroupedBatch::pack(&cols);
    let out = w.apply_phi(&batch).unwrap();
    for (b, col) in cols.iter().enumerate() {
        let solo = w.apply_phi(&GroupedBatch::single(col.clone())).unwrap();
        let got = out.column(b);
        for i in 0..n {
            assert!((solo.data[i] - got[i]).abs() < 1e-12);
        }
    }
}

fn bilinear_value(w: &BlockWeights, wv: &[f64], qv: &[f64]) -> f64 {
    let out = w.apply_phi(&GroupedBatch::single(qv.to_vec())).unwrap();
    wv.iter().zip(&out.data).map(|(a, b)| a * b).sum()
}

#[test]
fn phi_bilinear_grad_matches_finite_differences() {
    for (name, base) in [("dense", dense_toy(21, 0.1)), ("conv", conv_toy(22, 2))] {
        let n = base.layout().total_len();
        let mut r = rng(500);
        let wv = randn(&mut r, n, 1.0);
        let qv = randn(&mut r, n, 1.0);

        // unnormalized path: scales are constant
        let mut grads = PhiGrads::zeros_like(&base);
        base.accumulate_phi_bilinear_grad(
            &GroupedBatch::single(wv.clone()),
            &GroupedBatch::single(qv.clone()),
            1.0,
            &mut grads,
        )
        .unwrap();
        check_block_grads_fd(&base, &wv, &qv, &grads, false, name);

        // normalized path: chain through the scales
        let normed = base.spectral_normalize().unwrap();
        let mut grads = PhiGrads::zeros_like(&normed);
        normed
            .accumulate_phi_bilinear_grad(
                &GroupedBatch::single(wv.clone()),
                &GroupedBatch::single(qv.clone()),
                1.0,
                &mut grads,
            )
            .unwrap();
        normed.chain_scale_grad(&mut grads);
        check_block_grads_fd(&normed, &wv, &qv, &grads, true, name);
    }
}

fn check_block_grads_fd(
    w: &BlockWeights,
    wv: &[f64],
    qv: &[f64],
    grads: &PhiGrads,
    renormalize: bool,
    name: &str,
) {
    let eps = 1e-6;
    let mut r = rng(999);
    for bi in 0..w.blocks().len() {
        let len = w.blocks()[bi].weights.len();
        for _ in 0..6 {
            let e = r.gen_range(0..len);
            let eval = |delta: f64| -> f64 {
                let mut pert = w.clone();
                pert.update_blocks(renormalize, |i, ws| {
                    if i == bi {
                        ws[e] += delta;
                    }
                })
                .unwrap();
                bilinear_value(&pert, wv, qv)
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let got = grads.blocks[bi][e];
            assert!(
                (fd - got).abs() <= 1e-5 * fd.abs().max(1.0),
                "{name} (renormalize={renormalize}) block {bi} entry {e}: fd {fd} vs analytic {got}"
            );
        }
    }
}

#[test]
fn scale_gradient_matches_finite_differences() {
    let base = conv_toy(22, 2).spectral_normalize().unwrap();
    let n = base.layout().total_len();
    let mut r = rng(500);
    let wv = randn(&mut r, n, 1.0);
    let qv = randn(&mut r, n, 1.0);
    let mut grads = PhiGrads::zeros_like(&base);
    base.accumulate_phi_bilinear_grad(
        &GroupedBatch::single(wv.clone()),
        &GroupedBatch::single(qv.clone()),
        1.0,
        &mut grads,
    )
    .unwrap();
    let eps = 1e-6;
    for v in 0..base.layout().n_vars() {
        let c0 = base.scale()[v];
        let mut plus = base.clone();
        plus.set_scale_for_tests(v, c0 + eps);
        let mut minus = base.clone();
        minus.set_scale_for_tests(v, c0 - eps);
        let fd = (bilinear_value(&plus, &wv, &qv) - bilinear_value(&minus, &wv, &qv)) / (2.0 * eps);
        assert!(
            (fd - grads.scale[v]).abs() <= 1e-6 * fd.abs().max(1.0),
            "var {v}: fd {fd} analytic {}",
            grads.scale[v]
        );
    }
}

#[test]
fn decompose_total_fd() {
    let base = conv_toy(22, 2);
    let normed = base.spectral_normalize().unwrap();
    let n = normed.layout().total_len();
    let mut r = rng(500);
    let wv = randn(&mut r, n, 1.0);
    let qv = randn(&mut r, n, 1.0);
    let mut grads = PhiGrads::zeros_like(&normed);
    normed
        .accumulate_phi_bilinear_grad(
            &GroupedBatch::single(wv.clone()),
            &GroupedBatch::single(qv.clone()),
            1.0,
            &mut grads,
        )
        .unwrap();
    let direct_analytic = grads.blocks[0][0];
    normed.chain_scale_grad(&mut grads);
    let total_analytic = grads.blocks[0][0];

    let eps = 1e-6;
    let scales: Vec<f64> = normed.scale().to_vec();
    let eval_frozen = |delta: f64| {
        let mut p = normed.clone();
        p.update_blocks(false, |i, w| if i == 0 { w[0] += delta }).unwrap();
        for (v, &c) in scales.iter().enumerate() {
            p.set_scale_for_tests(v, c);
        }
        bilinear_value(&p, &wv, &qv)
    };
    let eval_total = |delta: f64| {
        let mut p = normed.clone();
        p.update_blocks(true, |i, w| if i == 0 { w[0] += delta }).unwrap();
        bilinear_value(&p, &wv, &qv)
    };
    let fd_direct = (eval_frozen(eps) - eval_frozen(-eps)) / (2.0 * eps);
    let fd_total = (eval_total(eps) - eval_total(-eps)) / (2.0 * eps);
    println!("direct: analytic {direct_analytic:.9} fd {fd_direct:.9}");
    println!("total:  analytic {total_analytic:.9} fd {fd_total:.9}");
    println!("chain contribution: analytic {:.9} fd {:.9}", total_analytic - direct_analytic, fd_total - fd_direct);
}
