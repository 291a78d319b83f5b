//! Exact t-SNE with a seeded initialisation, and the silhouette score.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::ImageRecord;
use crate::error::{Error, Result};
use crate::train::ModelBundle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    /// `None` picks `max(N / early_exaggeration / 4, 50)`.
    pub learning_rate: Option<f64>,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: None,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPlot {
    /// `N x 2` coordinates.
    pub points: Array2<f64>,
    pub labels: Vec<u8>,
    pub perplexity: f64,
    pub seed: u64,
}

fn squared_distances(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

/// Row-conditional affinities calibrated to the target perplexity by
/// bisection on the Gaussian precision, then symmetrised.
fn joint_probabilities(d: &Array2<f64>, perplexity: f64) -> Array2<f64> {
    let n = d.nrows();
    let target = perplexity.ln();
    let mut p = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let (mut beta, mut lo, mut hi) = (1.0f64, 0.0f64, f64::INFINITY);
        let row_min = (0..n).filter(|&j| j != i).map(|j| d[[i, j]]).fold(f64::INFINITY, f64::min);
        for _ in 0..100 {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                if j != i {
                    let e = (-(d[[i, j]] - row_min) * beta).exp();
                    p[[i, j]] = e;
                    sum += e;
                    weighted += d[[i, j]] * e;
                }
            }
            let entropy = sum.ln() + beta * (weighted / sum - row_min);
            for j in 0..n {
                p[[i, j]] /= sum;
            }
            let diff = entropy - target;
            if diff.abs() < 1e-5 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
    }
    let sym = (&p + &p.t()) / (2.0 * n as f64);
    sym.mapv(|v| v.max(1e-12))
}

/// Embeds the rows of `features` in two dimensions.
pub fn tsne(features: &Array2<f32>, cfg: &TsneConfig) -> Result<Array2<f64>> {
    let n = features.nrows();
    if n < 4 {
        return Err(Error::Explain(format!("t-SNE needs at least 4 points, got {n}")));
    }
    if !(cfg.perplexity > 0.0 && cfg.perplexity < n as f64 / 3.0) {
        return Err(Error::config(
            "tsne.perplexity",
            format!("must lie in (0, N/3) = (0, {:.2}) for N = {n}, got {}", n as f64 / 3.0, cfg.perplexity),
        ));
    }
    let x = features.mapv(f64::from);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Explain("features contain non-finite values".into()));
    }
    let p = joint_probabilities(&squared_distances(&x), cfg.perplexity);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Normal::new(0.0, 1e-4).expect("valid std");
    let mut y = Array2::from_shape_fn((n, 2), |_| init.sample(&mut rng));
    let mut update = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::ones((n, 2));
    let mut num = Array2::<f64>::zeros((n, n));
    let mut grad = Array2::<f64>::zeros((n, 2));
    let lr = cfg.learning_rate.unwrap_or_else(|| (n as f64 / cfg.early_exaggeration / 4.0).max(50.0));
    for it in 0..cfg.iterations {
        let exaggeration = if it < cfg.exaggeration_iterations { cfg.early_exaggeration } else { 1.0 };
        let momentum = if it < cfg.exaggeration_iterations { 0.5 } else { 0.8 };
        let mut z = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dy0 = y[[i, 0]] - y[[j, 0]];
                let dy1 = y[[i, 1]] - y[[j, 1]];
                let v = 1.0 / (1.0 + dy0 * dy0 + dy1 * dy1);
                num[[i, j]] = v;
                num[[j, i]] = v;
                z += 2.0 * v;
            }
        }
        grad.fill(0.0);
        for i in 0..n {
            let (mut g0, mut g1) = (0.0, 0.0);
            for j in 0..n {
                if i == j {
                    continue;
                }
                let m = (exaggeration * p[[i, j]] - num[[i, j]] / z) * num[[i, j]];
                g0 += m * (y[[i, 0]] - y[[j, 0]]);
                g1 += m * (y[[i, 1]] - y[[j, 1]]);
            }
            grad[[i, 0]] = 4.0 * g0;
            grad[[i, 1]] = 4.0 * g1;
        }
        for ((g, u), gain) in grad.iter().zip(update.iter_mut()).zip(gains.iter_mut()) {
            *gain = if (*g > 0.0) != (*u > 0.0) { *gain + 0.2 } else { (*gain * 0.8).max(0.01) };
            *u = momentum * *u - lr * *gain * g;
        }
        y += &update;
        let mean = y.mean_axis(ndarray::Axis(0)).expect("non-empty");
        y -= &mean;
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Explain("t-SNE diverged".into()));
    }
    Ok(y)
}

/// Embeds the model's penultimate features for `records`.
pub fn tsne_embed(model: &mut ModelBundle, records: &[ImageRecord], cfg: &TsneConfig) -> Result<EmbeddingPlot> {
    if records.is_empty() {
        return Err(Error::Explain("no records to embed".into()));
    }
    let (_, features) = model.infer_records(records)?;
    Ok(EmbeddingPlot {
        points: tsne(&features, cfg)?,
        labels: records.iter().map(|r| r.label).collect(),
        perplexity: cfg.perplexity,
        seed: cfg.seed,
    })
}

/// Mean silhouette coefficient of `points` under the given cluster ids.
pub fn silhouette_score(points: &Array2<f64>, clusters: &[usize]) -> Result<f64> {
    let n = points.nrows();
    if clusters.len() != n || n < 2 {
        return Err(Error::Explain("silhouette needs one cluster id per point and at least 2 points".into()));
    }
    let mut ids: Vec<usize> = clusters.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::Explain("silhouette needs at least 2 clusters".into()));
    }
    let dist = |i: usize, j: usize| -> f64 {
        points.row(i).iter().zip(points.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    };
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; ids.len()];
        let mut counts = vec![0usize; ids.len()];
        for (j, cj) in clusters.iter().enumerate() {
            if i != j {
                let k = ids.binary_search(cj).expect("known id");
                sums[k] += dist(i, j);
                counts[k] += 1;
            }
        }
        let own = ids.binary_search(&clusters[i]).expect("known id");
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..ids.len())
            .filter(|&k| k != own && counts[k] > 0)
            .map(|k| sums[k] / counts[k] as f64)
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    Ok(total / n as f64)
}

const PALETTE: [[u8; 3]; 6] = [[31, 119, 180], [44, 160, 44], [255, 127, 14], [214, 39, 40], [148, 103, 189], [127, 127, 127]];

/// Writes `<out>.csv` (`x,y,label`) and a `<out>.png` scatter plot coloured
/// by label.
pub fn write_embedding(plot: &EmbeddingPlot, out: &Path) -> Result<(PathBuf, PathBuf)> {
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let csv_path = out.with_extension("csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["x", "y", "label"])?;
    for (p, l) in plot.points.rows().into_iter().zip(&plot.labels) {
        w.write_record([p[0].to_string(), p[1].to_string(), l.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    const SIZE: u32 = 600;
    const MARGIN: f64 = 20.0;
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in plot.points.rows() {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let mut img = RgbImage::from_pixel(SIZE, SIZE, Rgb([255, 255, 255]));
    let span = f64::from(SIZE) - 2.0 * MARGIN;
    for (p, &l) in plot.points.rows().into_iter().zip(&plot.labels) {
        let px = |k: usize| MARGIN + span * (p[k] - lo[k]) / (hi[k] - lo[k]).max(1e-12);
        let (cx, cy) = (px(0) as i64, f64::from(SIZE) as i64 - px(1) as i64);
        let color = Rgb(PALETTE[usize::from(l).min(PALETTE.len() - 1)]);
        for dy in -3i64..=3 {
            for dx in -3i64..=3 {
                let (x, y) = (cx + dx, cy + dy);
                if dx * dx + dy * dy <= 9 && (0..i64::from(SIZE)).contains(&x) && (0..i64::from(SIZE)).contains(&y) {
                    img.put_pixel(x as u32, y as u32, color);
                }
            }
        }
    }
    let png_path = out.with_extension("png");
    img.save(&png_path).map_err(|source| Error::Image { path: png_path.clone(), source })?;
    Ok((csv_path, png_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n_per: usize) -> (Array2<f32>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = Normal::new(0.0f32, 0.3).unwrap();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..3 {
            for _ in 0..n_per {
                rows.extend((0..8).map(|k| if k == c { 5.0 } else { 0.0 } + noise.sample(&mut rng)));
                labels.push(c);
            }
        }
        (Array2::from_shape_vec((3 * n_per, 8), rows).unwrap(), labels)
    }

    fn quick() -> TsneConfig {
        TsneConfig { perplexity: 5.0, ..TsneConfig::default() }
    }

    #[test]
    fn separates_blobs_and_is_seeded() {
        let (x, labels) = blobs(15);
        let a = tsne(&x, &quick()).unwrap();
        let b = tsne(&x, &quick()).unwrap();
        assert_eq!(a.dim(), (45, 2));
        assert_eq!(a, b);
        assert!(silhouette_score(&a, &labels).unwrap() > 0.5);
    }

    #[test]
    fn perplexity_must_fit() {
        let (x, _) = blobs(5);
        let cfg = TsneConfig::default();
        match tsne(&x, &cfg) {
            Err(Error::InvalidConfig { key, .. }) => assert_eq!(key, "tsne.perplexity"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn silhouette_reference_values() {
        let pts = ndarray::arr2(&[[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]]);
        let s = silhouette_score(&pts, &[0, 0, 1, 1]).unwrap();
        // a = 1, b = (10 + sqrt(101)) / 2 for every point.
        let b = (10.0 + 101f64.sqrt()) / 2.0;
        assert!((s - (b - 1.0) / b).abs() < 1e-12);
        assert!(silhouette_score(&pts, &[0, 0, 0, 0]).is_err());
    }

    #[test]
    fn writes_csv_and_png() {
        let dir = tempfile::tempdir().unwrap();
        let plot = EmbeddingPlot {
            points: ndarray::arr2(&[[0.0, 0.0], [1.0, 2.0], [-1.0, 0.5]]),
            labels: vec![0, 4, 5],
            perplexity: 1.0,
            seed: 0,
        };
        let (csv_path, png_path) = write_embedding(&plot, &dir.path().join("tsne")).unwrap();
        let text = std::fs::read_to_string(csv_path).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("x,y,label"));
        assert!(png_path.is_file());
    }
}
