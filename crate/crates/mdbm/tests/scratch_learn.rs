use mdbm::data::{self, MaskPolicy};
use mdbm::meanfield::SolverConfig;
use mdbm::model::{Arch, MdbmModel};
use mdbm::train::{self, LossConfig, Optimizer};

#[test]
#[ignore]
fn learning_trajectory() {
    let arch = Arch::digits_halved(4);
    let mut model = MdbmModel::init(&arch, 1, true).unwrap();
    let dir = std::env::temp_dir().join("mdbm_learn");
    let paths = data::synth::write_corpus(&dir, 2000, 400, 28, 5).unwrap();
    let raw = data::RawImageSet::load(&paths[0], &paths[1]).unwrap();
    let test_raw = data::RawImageSet::load(&paths[2], &paths[3]).unwrap();
    let mut opt = Optimizer::new(&model, 0.01);
    let solver = SolverConfig::training();
    let loss_cfg = LossConfig::default();
    for epoch in 0..5 {
        let samples = data::make_masked_samples(&raw, 4, &model, MaskPolicy::Bernoulli(0.6), 1000 + epoch as u64 * 7919).unwrap();
        let t = std::time::Instant::now();
        let m = train::train_epoch(&mut model, &samples, 64, &solver, &loss_cfg, &mut opt, epoch).unwrap();
        // quick test accuracy on 100 test samples
        let test_samples = data::make_masked_samples(&test_raw, 4, &model, MaskPolicy::Bernoulli(0.6), 99).unwrap();
        let vcfg = SolverConfig::training();
        let mut correct = 0;
        for (i, s) in test_samples.iter().take(100).enumerate() {
            let pred = model.predict(s, &vcfg).unwrap();
            let probs = pred.label_distribution.unwrap();
            let argmax = probs.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            if argmax == test_raw.labels[i] as usize { correct += 1; }
        }
        println!("epoch {epoch}: {:?} loss {:.4} train_acc {:.3} fwd {:.1} bwd {:.1} test_acc {:.2}",
            t.elapsed(), m.mean_loss, m.accuracy, m.mean_fwd_iters, m.mean_bwd_iters, correct as f64 / 100.0);
    }
}
