//! Gaussian, box and bilateral filters. Accumulation is in `f64`.

use rayon::prelude::*;

use super::{map_index, Border};

/// Separable correlation of one plane with a symmetric 1-D kernel.
fn separable(src: &[f32], w: usize, h: usize, taps: &[f64], border: Border) -> Vec<f32> {
    let r = taps.len() / 2;
    let norm: f64 = taps.iter().sum();
    let mut tmp = vec![0f64; w * h];
    tmp.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let line = &src[y * w..(y + 1) * w];
        for (x, dst) in row.iter_mut().enumerate() {
            let mut acc = 0f64;
            for (t, &wt) in taps.iter().enumerate() {
                let sx = map_index(x as isize + t as isize - r as isize, w, border);
                acc += wt * f64::from(line[sx]);
            }
            *dst = acc / norm;
        }
    });
    let mut out = vec![0f32; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, dst) in row.iter_mut().enumerate() {
            let mut acc = 0f64;
            for (t, &wt) in taps.iter().enumerate() {
                let sy = map_index(y as isize + t as isize - r as isize, h, border);
                acc += wt * tmp[sy * w + x];
            }
            *dst = (acc / norm) as f32;
        }
    });
    out
}

pub(crate) fn gaussian_taps(kernel: usize, sigma: f64) -> Vec<f64> {
    let r = (kernel / 2) as f64;
    (0..kernel)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect()
}

pub(crate) fn gaussian(src: &[f32], w: usize, h: usize, kernel: usize, sigma: f64, border: Border) -> Vec<f32> {
    separable(src, w, h, &gaussian_taps(kernel, sigma), border)
}

/// Uniform mean over the window, via running sums along each axis.
pub(crate) fn box_mean(src: &[f32], w: usize, h: usize, kernel: usize, border: Border) -> Vec<f32> {
    let r = kernel as isize / 2;
    let k = kernel as f64;
    let running = |len: usize, get: &dyn Fn(usize) -> f64, put: &mut dyn FnMut(usize, f64)| {
        let mut acc: f64 = (-r..=r).map(|d| get(map_index(d, len, border))).sum();
        put(0, acc / k);
        for i in 1..len {
            acc += get(map_index(i as isize + r, len, border));
            acc -= get(map_index(i as isize - r - 1, len, border));
            put(i, acc / k);
        }
    };
    let mut tmp = vec![0f64; w * h];
    tmp.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let line = &src[y * w..(y + 1) * w];
        running(w, &|i| f64::from(line[i]), &mut |i, v| row[i] = v);
    });
    let mut out = vec![0f32; w * h];
    for x in 0..w {
        running(h, &|i| tmp[i * w + x], &mut |i, v| out[i * w + x] = v as f32);
    }
    out
}

/// Joint bilateral filter over the three channels of an interleaved HWC
/// buffer. The range kernel uses the Euclidean colour distance.
pub(crate) fn bilateral(
    src: &[f32],
    w: usize,
    h: usize,
    kernel: usize,
    sigma_space: f64,
    sigma_color: f64,
    border: Border,
) -> Vec<f32> {
    let r = (kernel / 2) as isize;
    let spatial: Vec<f64> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (-((dx * dx + dy * dy) as f64) / (2.0 * sigma_space * sigma_space)).exp()))
        .collect();
    let inv_2sc2 = 1.0 / (2.0 * sigma_color * sigma_color);
    let mut out = vec![0f32; w * h * 3];
    out.par_chunks_mut(w * 3).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let p = &src[(y * w + x) * 3..(y * w + x) * 3 + 3];
            let mut acc = [0f64; 3];
            let mut norm = 0f64;
            let mut s = 0;
            for dy in -r..=r {
                let sy = map_index(y as isize + dy, h, border);
                for dx in -r..=r {
                    let sx = map_index(x as isize + dx, w, border);
                    let q = &src[(sy * w + sx) * 3..(sy * w + sx) * 3 + 3];
                    let d2: f64 = (0..3).map(|c| (f64::from(q[c]) - f64::from(p[c])).powi(2)).sum();
                    let wt = spatial[s] * (-d2 * inv_2sc2).exp();
                    s += 1;
                    norm += wt;
                    for c in 0..3 {
                        acc[c] += wt * f64::from(q[c]);
                    }
                }
            }
            for c in 0..3 {
                row[x * 3 + c] = (acc[c] / norm) as f32;
            }
        }
    });
    out
}
