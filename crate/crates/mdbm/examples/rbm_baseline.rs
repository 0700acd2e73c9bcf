//! The layered RBM baseline: CD-1 training, Gibbs sampling, and block
//! mean-field imputation under the shared comparison protocol.
//! Run with `cargo run --release --example rbm_baseline`.

use mdbm::cli;
use mdbm::data::{self, MaskPolicy};
use mdbm::rbm::{DeepRbm, RbmClamp};

fn main() -> mdbm::Result<()> {
    let dir = std::env::temp_dir().join("mdbm_example_rbm");
    let paths = data::synth::write_corpus(&dir, 600, 128, 28, 21)?;
    let train_set = data::RawImageSet::load(&paths[0], &paths[1])?;
    let test_set = data::RawImageSet::load(&paths[2], &paths[3])?;

    let (rbm, log) = cli::train_rbm(&train_set, 120, 6, 128, 0.01, 3)?;
    for (epoch, (err, _)) in log.iter().enumerate() {
        println!("epoch {epoch}: reconstruction error {err:.4}");
    }

    // Gibbs sampling on a toy machine, checked against its conditionals
    let toy = DeepRbm::init(&[3, 2], 1)?;
    let res = toy.gibbs_chain(&RbmClamp::none(&[3, 2]), 5000, 9)?;
    println!("toy Gibbs unit means: {:?}", res.mean);

    // joint imputation + classification via damped block mean-field
    let mut eval = test_set;
    eval.truncate(64);
    let (acc, err) = cli::evaluate_rbm(&rbm, &eval, 4, MaskPolicy::Bernoulli(0.6), 5, 1000)?;
    println!("block mean-field at 40% observed: accuracy {acc:.3}, imputation error {err:.3}");
    Ok(())
}
