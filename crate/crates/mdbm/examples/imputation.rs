//! Pixel imputation under three masking policies, dumped as PGM grids.
//! Run with `cargo run --release --example imputation -- [out_dir]`.

use mdbm::data::{self, MaskPolicy};
use mdbm::meanfield::SolverConfig;
use mdbm::model::{Arch, MdbmModel};
use mdbm::train::{self, LossConfig, Optimizer};

fn main() -> mdbm::Result<()> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "imputation-out".to_string());
    let out = std::path::PathBuf::from(out);
    std::fs::create_dir_all(&out)?;

    let dir = std::env::temp_dir().join("mdbm_example_imputation");
    let paths = data::synth::write_corpus(&dir, 400, 32, 28, 7)?;
    let train_set = data::RawImageSet::load(&paths[0], &paths[1])?;
    let test_set = data::RawImageSet::load(&paths[2], &paths[3])?;

    let bins = 4;
    let mut model = MdbmModel::init(&Arch::digits_halved(bins), 0, true)?;
    let mut opt = Optimizer::new(&model, 0.01);
    let solver = SolverConfig::training();
    for epoch in 0..3 {
        let samples = data::make_masked_samples(
            &train_set,
            bins,
            &model,
            MaskPolicy::Bernoulli(0.6),
            epoch as u64,
        )?;
        let m = train::train_epoch(
            &mut model,
            &samples,
            64,
            &solver,
            &LossConfig::default(),
            &mut opt,
            epoch,
        )?;
        println!("epoch {epoch}: loss {:.4}", m.mean_loss);
    }

    let eval_cfg = SolverConfig::verification().with_tol(1e-4);
    let to_u8 = |bin: usize| ((bin as f64 + 0.5) / bins as f64 * 255.0).round() as u8;
    for (name, policy) in [
        ("bernoulli60", MaskPolicy::Bernoulli(0.6)),
        ("patch14", MaskPolicy::Patch(14)),
        ("tophalf", MaskPolicy::TopHalf),
    ] {
        let samples = data::make_masked_samples(&test_set, bins, &model, policy, 5)?;
        let mut observed = Vec::new();
        let mut imputed = Vec::new();
        let mut original = Vec::new();
        for (i, s) in samples.iter().take(16).enumerate() {
            let pred = model.predict(s, &eval_cfg)?;
            let recon = data::reconstruction_bins(&model, &pred.marginals);
            let truth = data::true_bins(&test_set, i, bins)?;
            let hidden = data::hidden_pixel_flags(&model, &s.mask);
            original.push(truth.iter().map(|&b| to_u8(b)).collect::<Vec<u8>>());
            observed.push(
                truth
                    .iter()
                    .zip(&hidden)
                    .map(|(&b, &h)| if h { 32 } else { to_u8(b) })
                    .collect::<Vec<u8>>(),
            );
            imputed.push(recon.iter().map(|&b| to_u8(b)).collect::<Vec<u8>>());
        }
        for (suffix, imgs) in [("observed", &observed), ("imputed", &imputed), ("original", &original)] {
            let path = out.join(format!("{name}-{suffix}.pgm"));
            data::pgm::write_pgm_grid(&path, imgs, 28, 28, 4)?;
        }
        println!("wrote {name}-{{observed,imputed,original}}.pgm under {}", out.display());
    }
    Ok(())
}
