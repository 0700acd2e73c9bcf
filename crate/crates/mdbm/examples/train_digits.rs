//! Joint imputation + classification training on a small synthetic digit
//! subset, with implicit gradients through the fixed point. A few minutes
//! on one core. Run with `cargo run --release --example train_digits`.

use mdbm::data::{self, MaskPolicy};
use mdbm::meanfield::SolverConfig;
use mdbm::model::{Arch, MdbmModel};
use mdbm::train::{self, LossConfig, Optimizer};

fn main() -> mdbm::Result<()> {
    let dir = std::env::temp_dir().join("mdbm_example_digits");
    let paths = data::synth::write_corpus(&dir, 600, 128, 28, 42)?;
    let train_set = data::RawImageSet::load(&paths[0], &paths[1])?;
    let test_set = data::RawImageSet::load(&paths[2], &paths[3])?;

    let bins = 4;
    let arch = Arch::digits_halved(bins);
    let mut model = MdbmModel::init(&arch, 0, true)?;
    println!(
        "model: {} coordinates, {} categorical variables, monotone margin {}",
        model.total_len(),
        model.n_vars(),
        model.weights.margin()
    );

    let mut opt = Optimizer::new(&model, 0.01);
    let solver = SolverConfig::training();
    let loss_cfg = LossConfig::default();
    for epoch in 0..4 {
        let samples = data::make_masked_samples(
            &train_set,
            bins,
            &model,
            MaskPolicy::Bernoulli(0.6),
            1000 + epoch as u64,
        )?;
        let m = train::train_epoch(&mut model, &samples, 64, &solver, &loss_cfg, &mut opt, epoch)?;
        println!(
            "epoch {epoch}: loss {:.4}, train acc {:.3}, fwd iters {:.1}, bwd iters {:.1} ({:.0}s)",
            m.mean_loss, m.accuracy, m.mean_fwd_iters, m.mean_bwd_iters, m.wall_time_s
        );
    }

    // held-out evaluation at 40% observed
    let samples = data::make_masked_samples(&test_set, bins, &model, MaskPolicy::Bernoulli(0.6), 9)?;
    let eval_cfg = SolverConfig::verification().with_tol(1e-4);
    let mut correct = 0;
    let mut err = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let pred = model.predict(s, &eval_cfg)?;
        let probs = pred.label_distribution.expect("label layer");
        let argmax = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        if argmax == test_set.labels[i] as usize {
            correct += 1;
        }
        let recon = data::reconstruction_bins(&model, &pred.marginals);
        err += data::imputation_error(&recon, &data::true_bins(&test_set, i, bins)?, bins, None)?;
    }
    println!(
        "test: accuracy {:.3}, mean imputation error {:.3}",
        correct as f64 / samples.len() as f64,
        err / samples.len() as f64
    );

    let ckpt = dir.join("checkpoint.mdbm");
    data::save_checkpoint(&model, &ckpt)?;
    let reloaded = data::load_checkpoint(&ckpt)?;
    assert_eq!(reloaded.bias, model.bias);
    println!("checkpoint round-trip at {}", ckpt.display());
    Ok(())
}
