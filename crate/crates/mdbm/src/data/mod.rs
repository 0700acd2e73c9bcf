//! Dataset ingestion, discretization, masking, and persistence.

mod checkpoint;
mod idx;
pub mod pgm;
pub mod synth;

pub use checkpoint::{load_checkpoint, load_rbm_checkpoint, save_checkpoint, save_rbm_checkpoint};
pub use idx::{load_idx, write_idx_images, write_idx_labels, IdxData};

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Mask, MaskedSample, MdbmModel};

/// A loaded grayscale image set with labels: intensities normalized to
/// `[0,1]`, labels in `[0, num_classes)`.
#[derive(Debug, Clone)]
pub struct RawImageSet {
    pub intensities: Vec<f64>,
    pub labels: Vec<u8>,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
}

impl RawImageSet {
    /// Load paired IDX image and label files.
    pub fn load(images_path: &Path, labels_path: &Path) -> Result<RawImageSet> {
        let images = match load_idx(images_path)? {
            IdxData::Images {
                data,
                count,
                height,
                width,
            } => (data, count, height, width),
            IdxData::Labels(_) => {
                return Err(Error::parse(format!(
                    "{} holds labels, expected images",
                    images_path.display()
                )))
            }
        };
        let labels = match load_idx(labels_path)? {
            IdxData::Labels(l) => l,
            IdxData::Images { .. } => {
                return Err(Error::parse(format!(
                    "{} holds images, expected labels",
                    labels_path.display()
                )))
            }
        };
        let (data, count, height, width) = images;
        if labels.len() != count {
            return Err(Error::parse(format!(
                "{count} images but {} labels",
                labels.len()
            )));
        }
        let num_classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(1);
        Ok(RawImageSet {
            intensities: data.iter().map(|&b| b as f64 / 255.0).collect(),
            labels,
            count,
            height,
            width,
            num_classes,
        })
    }

    /// Borrow one image's intensities.
    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.intensities[i * n..(i + 1) * n]
    }

    /// Keep only the first `n` images.
    pub fn truncate(&mut self, n: usize) {
        let n = n.min(self.count);
        self.count = n;
        self.intensities.truncate(n * self.height * self.width);
        self.labels.truncate(n);
    }
}

/// Even intensity binning with the top edge clamped into the last bin.
pub fn bin_index(v: f64, bins: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::domain(format!(
            "intensity {v} outside [0,1] cannot be binned"
        )));
    }
    Ok(((v * bins as f64).floor() as usize).min(bins - 1))
}

/// Bin every pixel of an image set and one-hot encode into model
/// coordinates (labels one-hot on the label variable; latent tiers zero).
pub fn bin_and_encode(
    raw: &RawImageSet,
    bins: usize,
    model: &MdbmModel,
) -> Result<Vec<Vec<f64>>> {
    if bins < 2 {
        return Err(Error::config("binning needs at least 2 bins"));
    }
    let layout = model.weights.layout();
    let pl = model.arch.pixel_layer;
    let spec = &layout.layers()[pl];
    if spec.cardinality() != bins || spec.height != raw.height || spec.width != raw.width {
        return Err(Error::layout(format!(
            "images are {}x{} with {bins} bins; pixel layer is {}x{} with cardinality {}",
            raw.height,
            raw.width,
            spec.height,
            spec.width,
            spec.cardinality()
        )));
    }
    let mut out = Vec::with_capacity(raw.count);
    for i in 0..raw.count {
        let mut x = vec![0.0; model.total_len()];
        let img = raw.image(i);
        for (p, &v) in img.iter().enumerate() {
            let (y, xc) = (p / raw.width, p % raw.width);
            let var = layout.var_id(pl, 0, y, xc);
            x[layout.var_coord(var, bin_index(v, bins)?)] = 1.0;
        }
        if let Some(lv) = model.label_var() {
            let label = raw.labels[i] as usize;
            let coords = layout.var_coords(lv);
            if label >= coords.len() {
                return Err(Error::domain(format!(
                    "label {label} outside the model's {} classes",
                    coords.len()
                )));
            }
            x[coords[label]] = 1.0;
        }
        out.push(x);
    }
    Ok(out)
}

/// Observation policies over the pixel grid. `p` and the patch side are the
/// hidden-side parameters: Bernoulli hides each pixel independently with
/// probability `p`; Patch hides one random `s x s` square; TopHalf hides
/// the top half. The label variable is always hidden.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum MaskPolicy {
    Bernoulli(f64),
    Patch(usize),
    TopHalf,
}

impl MaskPolicy {
    pub fn parse(s: &str) -> Result<MaskPolicy> {
        let lower = s.to_lowercase();
        if let Some(rest) = lower.strip_prefix("bernoulli:") {
            let p: f64 = rest
                .parse()
                .map_err(|_| Error::config(format!("bad bernoulli probability '{rest}'")))?;
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config("bernoulli probability must lie in [0,1]"));
            }
            return Ok(MaskPolicy::Bernoulli(p));
        }
        if let Some(rest) = lower.strip_prefix("patch:") {
            let s: usize = rest
                .parse()
                .map_err(|_| Error::config(format!("bad patch size '{rest}'")))?;
            return Ok(MaskPolicy::Patch(s));
        }
        if lower == "tophalf" {
            return Ok(MaskPolicy::TopHalf);
        }
        Err(Error::config(format!(
            "unknown mask policy '{s}' (expected bernoulli:P, patch:S or tophalf)"
        )))
    }
}

/// Deterministic observed/hidden partition over the pixel variables of a
/// model; latent tiers and the label stay hidden.
pub fn make_mask(model: &MdbmModel, policy: MaskPolicy, seed: u64) -> Result<Mask> {
    let layout = model.weights.layout();
    let pl = model.arch.pixel_layer;
    let spec = layout.layers()[pl].clone();
    let mut mask = Mask::all_hidden(model.n_vars());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match policy {
        MaskPolicy::Bernoulli(p) => {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config("bernoulli probability must lie in [0,1]"));
            }
            for y in 0..spec.height {
                for x in 0..spec.width {
                    let hidden = rng.gen::<f64>() < p;
                    if !hidden {
                        mask.set_observed(layout.var_id(pl, 0, y, x), true);
                    }
                }
            }
        }
        MaskPolicy::Patch(s) => {
            if s > spec.height || s > spec.width {
                return Err(Error::config(format!(
                    "patch {s} larger than the {}x{} image",
                    spec.height, spec.width
                )));
            }
            let oy = rng.gen_range(0..=spec.height - s);
            let ox = rng.gen_range(0..=spec.width - s);
            for y in 0..spec.height {
                for x in 0..spec.width {
                    let inside = y >= oy && y < oy + s && x >= ox && x < ox + s;
                    if !inside {
                        mask.set_observed(layout.var_id(pl, 0, y, x), true);
                    }
                }
            }
        }
        MaskPolicy::TopHalf => {
            for y in spec.height / 2..spec.height {
                for x in 0..spec.width {
                    mask.set_observed(layout.var_id(pl, 0, y, x), true);
                }
            }
        }
    }
    Ok(mask)
}

/// Encode a whole image set into masked samples with per-sample masks drawn
/// from `policy` (seeded per sample index).
pub fn make_masked_samples(
    raw: &RawImageSet,
    bins: usize,
    model: &MdbmModel,
    policy: MaskPolicy,
    seed: u64,
) -> Result<Vec<MaskedSample>> {
    let encoded = bin_and_encode(raw, bins, model)?;
    encoded
        .into_iter()
        .enumerate()
        .map(|(i, x)| {
            let mask = make_mask(model, policy, seed.wrapping_add(i as u64))?;
            Ok(MaskedSample { x, mask })
        })
        .collect()
}

/// Apply the intensity binning rule to Bernoulli means (the comparison
/// protocol for the RBM baseline).
pub fn bucketize_rbm_output(probabilities: &[f64], bins: usize) -> Result<Vec<usize>> {
    probabilities.iter().map(|&p| bin_index(p, bins)).collect()
}

/// Bin-index reconstruction of the pixel grid: per-pixel argmax of the
/// marginals.
pub fn reconstruction_bins(model: &MdbmModel, marginals: &[f64]) -> Vec<usize> {
    let layout = model.weights.layout();
    let pl = model.arch.pixel_layer;
    let spec = &layout.layers()[pl];
    let mut out = Vec::with_capacity(spec.height * spec.width);
    for y in 0..spec.height {
        for x in 0..spec.width {
            let v = layout.var_id(pl, 0, y, x);
            let coords = layout.var_coords(v);
            let best = coords
                .iter()
                .enumerate()
                .max_by(|a, b| marginals[*a.1].total_cmp(&marginals[*b.1]))
                .map(|(j, _)| j)
                .unwrap_or(0);
            out.push(best);
        }
    }
    out
}

/// Squared error between bin-index reconstructions, divided by the number
/// of bins (one image's contribution; averaging over a dataset is the
/// caller's reduction). `hidden_only` restricts the sum to hidden pixels.
pub fn imputation_error(
    predicted_bins: &[usize],
    true_bins: &[usize],
    bins: usize,
    hidden_only: Option<&[bool]>,
) -> Result<f64> {
    if predicted_bins.len() != true_bins.len() {
        return Err(Error::layout(format!(
            "imputation_error: {} predictions vs {} truths",
            predicted_bins.len(),
            true_bins.len()
        )));
    }
    let mut acc = 0.0;
    for i in 0..true_bins.len() {
        if let Some(h) = hidden_only {
            if !h[i] {
                continue;
            }
        }
        let d = predicted_bins[i] as f64 - true_bins[i] as f64;
        acc += d * d;
    }
    Ok(acc / bins as f64)
}

/// Hidden-pixel flags in pixel-grid order for one mask.
pub fn hidden_pixel_flags(model: &MdbmModel, mask: &Mask) -> Vec<bool> {
    let layout = model.weights.layout();
    let pl = model.arch.pixel_layer;
    let spec = &layout.layers()[pl];
    let mut out = Vec::with_capacity(spec.height * spec.width);
    for y in 0..spec.height {
        for x in 0..spec.width {
            out.push(!mask.is_observed(layout.var_id(pl, 0, y, x)));
        }
    }
    out
}

/// True bin indices of one image.
pub fn true_bins(raw: &RawImageSet, i: usize, bins: usize) -> Result<Vec<usize>> {
    raw.image(i).iter().map(|&v| bin_index(v, bins)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Arch;

    fn toy_model() -> MdbmModel {
        let arch = Arch::conv_stack(4, 4, 4, 10, 4, 4).unwrap();
        MdbmModel::init(&arch, 0, true).unwrap()
    }

    #[test]
    fn bin_boundaries() {
        assert_eq!(bin_index(0.0, 4).unwrap(), 0);
        assert_eq!(bin_index(1.0, 4).unwrap(), 3);
        assert_eq!(bin_index(0.5, 4).unwrap(), 2);
        assert_eq!(bin_index(0.49, 2).unwrap(), 0);
        assert_eq!(bin_index(0.51, 2).unwrap(), 1);
        assert!(bin_index(1.1, 4).is_err());
        assert!(bin_index(-0.01, 4).is_err());
    }

    #[test]
    fn binning_is_invertible_on_a_grid() {
        // decode(argmax(encode(v))) lands in v's bin across [0,1]
        for i in 0..=1000 {
            let v = i as f64 / 1000.0;
            for bins in [2usize, 4, 10] {
                let b = bin_index(v, bins).unwrap();
                let center = (b as f64 + 0.5) / bins as f64;
                assert_eq!(bin_index(center, bins).unwrap(), b, "v={v} bins={bins}");
            }
        }
    }

    #[test]
    fn mask_policies_cover_edge_cases() {
        let model = toy_model();
        let all_obs = make_mask(&model, MaskPolicy::Bernoulli(0.0), 7).unwrap();
        let all_hidden = make_mask(&model, MaskPolicy::Bernoulli(1.0), 7).unwrap();
        let layout = model.weights.layout();
        for y in 0..4 {
            for x in 0..4 {
                let v = layout.var_id(0, 0, y, x);
                assert!(all_obs.is_observed(v));
                assert!(!all_hidden.is_observed(v));
            }
        }
        // label and latents always hidden
        assert!(!all_obs.is_observed(model.label_var().unwrap()));
        assert!(make_mask(&model, MaskPolicy::Patch(5), 0).is_err());
        let top = make_mask(&model, MaskPolicy::TopHalf, 0).unwrap();
        assert!(!top.is_observed(layout.var_id(0, 0, 0, 0)));
        assert!(top.is_observed(layout.var_id(0, 0, 3, 0)));
    }

    #[test]
    fn masks_are_seed_deterministic() {
        let model = toy_model();
        let a = make_mask(&model, MaskPolicy::Bernoulli(0.6), 42).unwrap();
        let b = make_mask(&model, MaskPolicy::Bernoulli(0.6), 42).unwrap();
        assert_eq!(a, b);
        let c = make_mask(&model, MaskPolicy::Bernoulli(0.6), 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn bernoulli_hidden_fraction_concentrates() {
        // 28x28 grid, p = 0.6: hidden fraction within +-0.05
        let arch = Arch::digits_halved(4);
        let model = MdbmModel::init(&arch, 0, false).unwrap();
        let mask = make_mask(&model, MaskPolicy::Bernoulli(0.6), 11).unwrap();
        let flags = hidden_pixel_flags(&model, &mask);
        let frac = flags.iter().filter(|&&h| h).count() as f64 / flags.len() as f64;
        assert!((frac - 0.6).abs() < 0.05, "hidden fraction {frac}");
    }

    #[test]
    fn imputation_error_formula() {
        let truth = vec![0usize, 1, 2, 3];
        assert_eq!(imputation_error(&truth, &truth, 4, None).unwrap(), 0.0);
        let off = vec![0usize, 2, 2, 3];
        assert_eq!(imputation_error(&off, &truth, 4, None).unwrap(), 0.25);
    }

    #[test]
    fn bucketize_matches_scalar_rule() {
        let probs = [0.0, 0.49, 0.51, 1.0];
        let got = bucketize_rbm_output(&probs, 2).unwrap();
        let want: Vec<usize> = probs.iter().map(|&p| bin_index(p, 2).unwrap()).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let model = toy_model();
        let dir = std::env::temp_dir().join("mdbm_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("toy.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(model.bias, loaded.bias);
        assert_eq!(model.log_temp, loaded.log_temp);
        assert_eq!(model.monotone_mode, loaded.monotone_mode);
        for (a, b) in model.weights.blocks().iter().zip(loaded.weights.blocks()) {
            assert_eq!(a.weights, b.weights);
            assert_eq!(a.spec, b.spec);
        }
        assert_eq!(model.weights.scale(), loaded.weights.scale());
    }

    #[test]
    fn checkpoint_rejects_truncation_and_unknown_version() {
        let model = toy_model();
        let dir = std::env::temp_dir().join("mdbm_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trunc.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(load_checkpoint(&path).is_err());

        let versioned = dir.join("badver.ckpt");
        let mut text = bytes.clone();
        text[17] = b'9'; // MDBM-CHECKPOINT v9
        std::fs::write(&versioned, &text).unwrap();
        let err = load_checkpoint(&versioned).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }
}
