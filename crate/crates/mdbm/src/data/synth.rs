//! Deterministic synthetic digit corpus: stroke skeletons per class,
//! randomly warped, rasterized with soft-edged strokes and pixel noise.
//! Written as ordinary IDX files so the whole ingestion path is exercised.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::idx;

type Polyline = Vec<(f64, f64)>;

fn circle(cx: f64, cy: f64, rx: f64, ry: f64, n: usize) -> Polyline {
    (0..=n)
        .map(|i| {
            let t = i as f64 / n as f64 * std::f64::consts::TAU;
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

/// Stroke skeletons in the unit square (x right, y down).
fn skeleton(class: u8) -> Vec<Polyline> {
    match class {
        0 => vec![circle(0.5, 0.5, 0.21, 0.3, 16)],
        1 => vec![
            vec![(0.4, 0.3), (0.55, 0.18), (0.55, 0.82)],
            vec![(0.42, 0.82), (0.68, 0.82)],
        ],
        2 => vec![vec![
            (0.31, 0.34),
            (0.36, 0.22),
            (0.5, 0.18),
            (0.64, 0.23),
            (0.68, 0.34),
            (0.62, 0.48),
            (0.32, 0.82),
            (0.71, 0.82),
        ]],
        3 => vec![vec![
            (0.33, 0.25),
            (0.47, 0.18),
            (0.63, 0.24),
            (0.66, 0.36),
            (0.52, 0.47),
            (0.67, 0.57),
            (0.68, 0.72),
            (0.52, 0.82),
            (0.33, 0.75),
        ]],
        4 => vec![
            vec![(0.62, 0.18), (0.3, 0.6), (0.74, 0.6)],
            vec![(0.62, 0.18), (0.62, 0.82)],
        ],
        5 => vec![vec![
            (0.68, 0.18),
            (0.35, 0.18),
            (0.33, 0.46),
            (0.52, 0.42),
            (0.67, 0.52),
            (0.67, 0.7),
            (0.5, 0.82),
            (0.32, 0.75),
        ]],
        6 => vec![vec![
            (0.63, 0.19),
            (0.45, 0.25),
            (0.35, 0.45),
            (0.34, 0.66),
            (0.44, 0.81),
            (0.6, 0.79),
            (0.67, 0.64),
            (0.58, 0.51),
            (0.42, 0.53),
            (0.35, 0.63),
        ]],
        7 => vec![
            vec![(0.3, 0.18), (0.7, 0.18), (0.44, 0.82)],
            vec![(0.4, 0.52), (0.62, 0.52)],
        ],
        8 => vec![
            circle(0.5, 0.33, 0.15, 0.15, 12),
            circle(0.5, 0.64, 0.18, 0.18, 12),
        ],
        _ => vec![
            circle(0.53, 0.34, 0.16, 0.16, 12),
            vec![(0.69, 0.38), (0.6, 0.82)],
        ],
    }
}

fn dist_to_segment(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (ax, ay) = a;
    let (bx, by) = b;
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx) * (px - cx) + (py - cy) * (py - cy)).sqrt()
}

/// Render one digit as `side x side` grayscale intensities in `[0,1]`.
pub fn render_digit(class: u8, side: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let strokes = skeleton(class % 10);
    // random affine warp around the glyph center
    let rot: f64 = rng.gen_range(-0.22..0.22);
    let (sx, sy) = (rng.gen_range(0.82..1.1), rng.gen_range(0.82..1.1));
    let shear = rng.gen_range(-0.18..0.18);
    let (tx, ty) = (rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05));
    let (c, s) = (rot.cos(), rot.sin());
    let warp = |(x, y): (f64, f64)| {
        let (x, y) = (x - 0.5, y - 0.5);
        let (x, y) = (sx * x + shear * y, sy * y);
        let (x, y) = (c * x - s * y, s * x + c * y);
        (x + 0.5 + tx, y + 0.5 + ty)
    };
    let warped: Vec<Polyline> = strokes
        .iter()
        .map(|p| p.iter().map(|&pt| warp(pt)).collect())
        .collect();

    let width = rng.gen_range(0.05..0.085);
    let mut img = vec![0.0f64; side * side];
    for py in 0..side {
        for px in 0..side {
            let (ux, uy) = (
                (px as f64 + 0.5) / side as f64,
                (py as f64 + 0.5) / side as f64,
            );
            let mut d = f64::INFINITY;
            for stroke in &warped {
                for seg in stroke.windows(2) {
                    d = d.min(dist_to_segment(ux, uy, seg[0], seg[1]));
                }
            }
            // soft-edged stroke profile
            let v = ((width - d) / (0.4 * width)).clamp(0.0, 1.0);
            img[py * side + px] = v;
        }
    }
    for v in img.iter_mut() {
        let noise: f64 = rng.gen_range(-0.05..0.05);
        *v = (*v + noise).clamp(0.0, 1.0);
    }
    img
}

/// Render a balanced, shuffled corpus and return `(pixels u8, labels)`.
pub fn render_corpus(count: usize, side: usize, rng: &mut ChaCha8Rng) -> (Vec<u8>, Vec<u8>) {
    let mut labels: Vec<u8> = (0..count).map(|i| (i % 10) as u8).collect();
    for i in (1..labels.len()).rev() {
        let j = rng.gen_range(0..=i);
        labels.swap(i, j);
    }
    let mut pixels = Vec::with_capacity(count * side * side);
    for &class in &labels {
        let img = render_digit(class, side, rng);
        pixels.extend(img.iter().map(|&v| (v * 255.0).round() as u8));
    }
    (pixels, labels)
}

/// Write a train/test split of the synthetic corpus as four IDX files in
/// `dir`; returns the file names in loaders' conventional order.
pub fn write_corpus(
    dir: &Path,
    n_train: usize,
    n_test: usize,
    side: usize,
    seed: u64,
) -> Result<[std::path::PathBuf; 4]> {
    use rand::SeedableRng;
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train_px, train_lb) = render_corpus(n_train, side, &mut rng);
    let (test_px, test_lb) = render_corpus(n_test, side, &mut rng);
    let paths = [
        dir.join("train-images.idx3-ubyte"),
        dir.join("train-labels.idx1-ubyte"),
        dir.join("t10k-images.idx3-ubyte"),
        dir.join("t10k-labels.idx1-ubyte"),
    ];
    idx::write_idx_images(&paths[0], &train_px, n_train, side, side)?;
    idx::write_idx_labels(&paths[1], &train_lb)?;
    idx::write_idx_images(&paths[2], &test_px, n_test, side, side)?;
    idx::write_idx_labels(&paths[3], &test_lb)?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn renders_are_deterministic_and_in_range() {
        let a = render_digit(7, 28, &mut ChaCha8Rng::seed_from_u64(3));
        let b = render_digit(7, 28, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // the glyph must actually draw something
        assert!(a.iter().filter(|&&v| v > 0.5).count() > 20);
    }

    #[test]
    fn corpus_is_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, labels) = render_corpus(200, 14, &mut rng);
        let mut counts = [0usize; 10];
        for &l in &labels {
            counts[l as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c == 20));
    }

    #[test]
    fn classes_are_separable_by_nearest_centroid() {
        // cheap learnability proxy: per-class mean images classify a fresh
        // batch well above chance
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let side = 28;
        let (train_px, train_lb) = render_corpus(600, side, &mut rng);
        let (test_px, test_lb) = render_corpus(200, side, &mut rng);
        let dim = side * side;
        let mut centroids = vec![vec![0.0f64; dim]; 10];
        let mut counts = [0usize; 10];
        for (i, &l) in train_lb.iter().enumerate() {
            counts[l as usize] += 1;
            for d in 0..dim {
                centroids[l as usize][d] += train_px[i * dim + d] as f64;
            }
        }
        for (c, n) in centroids.iter_mut().zip(counts) {
            c.iter_mut().for_each(|v| *v /= n as f64);
        }
        let mut correct = 0;
        for (i, &l) in test_lb.iter().enumerate() {
            let mut best = (f64::INFINITY, 0usize);
            for (cls, c) in centroids.iter().enumerate() {
                let d: f64 = (0..dim)
                    .map(|d| {
                        let diff = test_px[i * dim + d] as f64 - c[d];
                        diff * diff
                    })
                    .sum();
                if d < best.0 {
                    best = (d, cls);
                }
            }
            if best.1 == l as usize {
                correct += 1;
            }
        }
        let acc = correct as f64 / test_lb.len() as f64;
        assert!(acc > 0.6, "nearest-centroid accuracy {acc}");
    }
}
