//! Fixed-point solver behavior against the brute-force oracles.

use mdbm::linops::GroupedBatch;
use mdbm::meanfield::{self, InferenceMethod, SolverConfig};
use mdbm::model::{Arch, Mask, MaskedSample, MdbmModel};
use mdbm::prox::softmax_in_place;
use mdbm::verify;

fn zero_phi_model(n_vars: usize, k: usize) -> MdbmModel {
    let arch = Arch::dense_toy(n_vars, k, 0.1);
    let mut model = MdbmModel::init(&arch, 0, false).unwrap();
    model
        .weights
        .update_blocks(false, |_, w| w.iter_mut().for_each(|x| *x = 0.0))
        .unwrap();
    let mut r = verify::rng(9);
    model.bias = verify::randn(&mut r, model.total_len(), 1.0);
    model
}

#[test]
fn zero_phi_fixed_point_is_softmax_of_bias() {
    let model = zero_phi_model(4, 3);
    let layout = model.weights.layout().clone();
    let masks = vec![Mask::all_hidden(4)];
    let x = GroupedBatch::single(vec![0.0; model.total_len()]);
    let injection =
        meanfield::input_injection(&model.weights, &x, &masks, &model.bias).unwrap();
    for alpha in [0.125, 0.5, 1.0] {
        let cfg = SolverConfig::verification().with_alpha(alpha).with_tol(1e-9);
        let (q, traces) =
            meanfield::solve_forward(&model.weights, &injection, &masks, &cfg).unwrap();
        assert!(traces[0].converged);
        if alpha == 1.0 {
            // the undamped map is constant here, so one step lands exactly
            assert!(
                traces[0].iterations <= 2,
                "iterations {}",
                traces[0].iterations
            );
        }
        for v in 0..4 {
            let coords = layout.var_coords(v);
            let mut sm: Vec<f64> = coords.iter().map(|&c| model.bias[c]).collect();
            softmax_in_place(&mut sm);
            for (j, &c) in coords.iter().enumerate() {
                assert!((q.data[c] - sm[j]).abs() < 1e-6, "alpha {alpha} var {v}");
            }
        }
    }
}

#[test]
fn injection_reduces_to_bias_when_nothing_observed() {
    let model = zero_phi_model(3, 2);
    let masks = vec![Mask::all_hidden(3)];
    let x = GroupedBatch::single(vec![0.0; model.total_len()]);
    let inj = meanfield::input_injection(&model.weights, &x, &masks, &model.bias).unwrap();
    for c in 0..model.total_len() {
        assert_eq!(inj.data[c], model.bias[c]);
    }
}

#[test]
fn injection_matches_dense_blocks() {
    let model = verify::random_dense_model(21, 5, 3, 0.1, true);
    let mask = verify::random_mask(3, &model, 0.5);
    let sample = verify::random_sample(4, &model, mask);
    let masks = vec![sample.mask.clone()];
    let x = GroupedBatch::single(sample.x.clone());
    let inj = meanfield::input_injection(&model.weights, &x, &masks, &model.bias).unwrap();

    let phi = model.weights.materialize_dense().unwrap();
    let layout = model.weights.layout();
    let mut x_obs = vec![0.0; model.total_len()];
    for v in 0..model.n_vars() {
        if sample.mask.is_observed(v) {
            for &c in &layout.var_coords(v) {
                x_obs[c] = sample.x[c];
            }
        }
    }
    for v in 0..model.n_vars() {
        if sample.mask.is_observed(v) {
            continue;
        }
        for &c in &layout.var_coords(v) {
            let mut want = model.bias[c];
            for j in 0..model.total_len() {
                want += phi[(c, j)] * x_obs[j];
            }
            assert!((inj.data[c] - want).abs() < 1e-10);
        }
    }
}

#[test]
fn forward_solver_agrees_with_coordinate_ascent() {
    for seed in 0..5 {
        let model = verify::random_dense_model(seed, 4, 3, 0.1, true);
        let mask = verify::random_mask(seed + 50, &model, 0.75);
        let sample = verify::random_sample(seed + 90, &model, mask);
        let masks = vec![sample.mask.clone()];
        let x = GroupedBatch::single(sample.x.clone());
        let inj = meanfield::input_injection(&model.weights, &x, &masks, &model.bias).unwrap();
        let cfg = SolverConfig::verification().with_tol(1e-9);
        let (q, traces) = meanfield::solve_forward(&model.weights, &inj, &masks, &cfg).unwrap();
        assert!(traces[0].converged);
        let (oracle, _, oc) = model.coordinate_ascent_meanfield(&sample, 1e-10, 50_000).unwrap();
        assert!(oc);
        for v in sample.mask.hidden_vars() {
            for &c in &model.weights.layout().var_coords(v) {
                assert!(
                    (q.data[c] - oracle[c]).abs() < 1e-6,
                    "seed {seed} coord {c}: {} vs {}",
                    q.data[c],
                    oracle[c]
                );
            }
        }
    }
}

#[test]
fn uniqueness_over_random_starts() {
    let res = verify::check_global_fixed_point(6, 4);
    assert!(res.passed, "{}", res.detail);
}

#[test]
fn anderson_reaches_same_fixed_point() {
    let model = verify::random_dense_model(77, 6, 3, 0.1, true);
    let mask = verify::random_mask(78, &model, 0.8);
    let sample = verify::random_sample(79, &model, mask);
    let masks = vec![sample.mask.clone()];
    let x = GroupedBatch::single(sample.x.clone());
    let inj = meanfield::input_injection(&model.weights, &x, &masks, &model.bias).unwrap();
    let plain_cfg = SolverConfig::verification().with_tol(1e-10);
    let mut aa_cfg = plain_cfg.clone();
    aa_cfg.anderson_window = 5;
    let (qp, tp) = meanfield::solve_forward(&model.weights, &inj, &masks, &plain_cfg).unwrap();
    let (qa, ta) = meanfield::solve_forward(&model.weights, &inj, &masks, &aa_cfg).unwrap();
    assert!(tp[0].converged && ta[0].converged);
    assert!(verify::max_abs_diff(&qp.data, &qa.data) < 1e-8);
}

#[test]
fn backward_zero_upstream_gives_zero() {
    let model = verify::random_dense_model(31, 4, 3, 0.1, true);
    let masks = vec![Mask::all_hidden(model.n_vars())];
    let x = GroupedBatch::single(vec![0.0; model.total_len()]);
    let inj = meanfield::input_injection(&model.weights, &x, &masks, &model.bias).unwrap();
    let cfg = SolverConfig::verification();
    let (q, _) = meanfield::solve_forward(&model.weights, &inj, &masks, &cfg).unwrap();
    let upstream = GroupedBatch::zeros(model.total_len(), 1);
    let back =
        meanfield::solve_backward(&model.weights, &q, &inj, &masks, &upstream, &cfg).unwrap();
    assert!(back.u.data.iter().all(|&v| v == 0.0));
}

#[test]
fn backward_softmax_jacobian_at_alpha_one_zero_phi() {
    // with Phi = 0 and alpha = 1 the implicit system collapses: u* equals
    // the upstream and D u* is the softmax Jacobian product
    let model = zero_phi_model(3, 4);
    let layout = model.weights.layout().clone();
    let masks = vec![Mask::all_hidden(3)];
    let x = GroupedBatch::single(vec![0.0; model.total_len()]);
    let inj = meanfield::input_injection(&model.weights, &x, &masks, &model.bias).unwrap();
    let cfg = SolverConfig::verification().with_alpha(1.0);
    let (q, _) = meanfield::solve_forward(&model.weights, &inj, &masks, &cfg).unwrap();
    let mut r = verify::rng(5);
    let upstream = GroupedBatch::single(verify::randn(&mut r, model.total_len(), 1.0));
    let back =
        meanfield::solve_backward(&model.weights, &q, &inj, &masks, &upstream, &cfg).unwrap();
    assert!(back.traces[0].iterations <= 2);
    for v in 0..3 {
        let coords = layout.var_coords(v);
        let z: Vec<f64> = coords.iter().map(|&c| q.data[c]).collect();
        let u: Vec<f64> = coords.iter().map(|&c| upstream.data[c]).collect();
        let dot: f64 = z.iter().zip(&u).map(|(a, b)| a * b).sum();
        for (j, &c) in coords.iter().enumerate() {
            let want = z[j] * (u[j] - dot);
            assert!(
                (back.dprox_u.data[c] - want).abs() < 1e-9,
                "var {v} entry {j}"
            );
        }
    }
}

#[test]
fn implicit_gradient_matches_finite_differences_dense() {
    // d <w, q*> / dA through the fixed point, checked by central
    // differences on a 3-variable model
    for seed in [1u64, 2, 3] {
        let model = verify::random_dense_model(seed, 3, 3, 0.1, true);
        let mut r = verify::rng(seed + 1000);
        let wvec = verify::randn(&mut r, model.total_len(), 1.0);
        let masks = vec![Mask::all_hidden(model.n_vars())];
        let xv = GroupedBatch::single(vec![0.0; model.total_len()]);
        let cfg = SolverConfig::verification().with_tol(1e-12);

        let solve_value = |m: &MdbmModel| -> f64 {
            let inj =
                meanfield::input_injection(&m.weights, &xv, &masks, &m.bias).unwrap();
            let (q, tr) = meanfield::solve_forward(&m.weights, &inj, &masks, &cfg).unwrap();
            assert!(tr[0].converged);
            q.data.iter().zip(&wvec).map(|(a, b)| a * b).sum()
        };

        // analytic: u* then alpha * bilinear(dprox_u, q~) + scale chain
        let inj = meanfield::input_injection(&model.weights, &xv, &masks, &model.bias).unwrap();
        let (q, _) = meanfield::solve_forward(&model.weights, &inj, &masks, &cfg).unwrap();
        let upstream = GroupedBatch::single(wvec.clone());
        let back =
            meanfield::solve_backward(&model.weights, &q, &inj, &masks, &upstream, &cfg).unwrap();
        let mut grads = mdbm::linops::PhiGrads::zeros_like(&model.weights);
        model
            .weights
            .accumulate_phi_bilinear_grad(&back.dprox_u, &q, cfg.alpha, &mut grads)
            .unwrap();
        model.weights.chain_scale_grad(&mut grads);

        // the difference quotient amplifies the solver's tolerance floor,
        // so the step cannot be too small
        let eps = 1e-3;
        let mut checked = 0;
        for e in (0..model.weights.blocks()[0].weights.len()).step_by(7) {
            let mut perturb = |delta: f64| -> f64 {
                let mut m = model.clone();
                m.weights
                    .update_blocks(true, |i, w| {
                        if i == 0 {
                            w[e] += delta;
                        }
                    })
                    .unwrap();
                solve_value(&m)
            };
            let fd = (perturb(eps) - perturb(-eps)) / (2.0 * eps);
            let got = grads.blocks[0][e];
            assert!(
                (fd - got).abs() <= 1e-5 * fd.abs().max(1e-2),
                "seed {seed} entry {e}: fd {fd} vs analytic {got}"
            );
            checked += 1;
        }
        assert!(checked >= 10);
    }
}

#[test]
fn compare_methods_trivial_model() {
    // zero potential AND zero bias: the uniform point is the common fixed
    // point of every update rule (Frank-Wolfe's fixed point differs from
    // the mean-field one whenever the pre-activations are nonzero)
    let mut model = zero_phi_model(4, 3);
    model.bias.iter_mut().for_each(|b| *b = 0.0);
    let sample = MaskedSample {
        x: vec![0.0; model.total_len()],
        mask: Mask::all_hidden(4),
    };
    let metrics = meanfield::compare_inference(
        &model,
        std::slice::from_ref(&sample),
        &[
            InferenceMethod::Ours,
            InferenceMethod::Baque,
            InferenceMethod::Cccp,
            InferenceMethod::FrankWolfe(0.7),
        ],
        200,
        1e-8,
    )
    .unwrap();
    for m in &metrics {
        let tv = m.tv_distance.expect("oracle feasible");
        assert!(tv < 1e-6, "{}: tv {tv}", m.method);
        if m.method == "cccp" {
            assert!(m.iterations <= 2, "cccp iterations {}", m.iterations);
        }
    }
}

#[test]
fn frank_wolfe_alpha_one_lambda_one_equals_cccp() {
    let model = verify::random_dense_model(44, 4, 3, 0.1, true);
    let masks = vec![Mask::all_hidden(model.n_vars())];
    let x = GroupedBatch::single(vec![0.0; model.total_len()]);
    let inj = meanfield::input_injection(&model.weights, &x, &masks, &model.bias).unwrap();
    let mut q = GroupedBatch::zeros(model.total_len(), 1);
    // uniform start
    let layout = model.weights.layout();
    layout.for_each_var(|_, layer, coord0, stride| {
        let k = layout.layers()[layer].cardinality();
        for j in 0..k {
            q.row_mut(coord0 + j * stride)[0] = 1.0 / k as f64;
        }
    });
    let fw = meanfield::step_frank_wolfe(&model.weights, &q, &masks, &inj, 1.0, 1.0).unwrap();
    let cccp = meanfield::step_cccp(&model.weights, &q, &masks, &inj).unwrap();
    assert!(verify::max_abs_diff(&fw.data, &cccp.data) < 1e-14);
}

#[test]
fn baque_rejects_zero_iterates() {
    let model = verify::random_dense_model(45, 3, 2, 0.1, true);
    let masks = vec![Mask::all_hidden(model.n_vars())];
    let x = GroupedBatch::single(vec![0.0; model.total_len()]);
    let inj = meanfield::input_injection(&model.weights, &x, &masks, &model.bias).unwrap();
    let q = GroupedBatch::zeros(model.total_len(), 1);
    assert!(meanfield::step_baque(&model.weights, &q, &masks, &inj, 0.125).is_err());
}

#[test]
fn nonmonotone_coordinate_ascent_is_multimodal() {
    let res = verify::check_nonmonotone_multimodal();
    assert!(res.passed, "{}", res.detail);
}

#[test]
fn contraction_and_feasibility() {
    let res = verify::check_contraction(10);
    assert!(res.passed, "{}", res.detail);
}

#[test]
fn fixed_point_verification_protocol() {
    let res = verify::check_fixed_point_verification(10);
    assert!(res.passed, "{}", res.detail);
}
