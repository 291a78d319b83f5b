//! Median filtering.
//!
//! The production path is the constant-time algorithm of Perreault and
//! Hébert: one 256-bin histogram per image column is slid down the image, and
//! the kernel histogram is slid across each row by adding the entering column
//! and subtracting the leaving one. Histograms are split into a 16-bucket
//! coarse level and 16 fine bins per bucket; only the fine bins of the bucket
//! holding the median are brought up to date, lazily, so the per-pixel cost
//! does not depend on the kernel size. This path requires 8-bit channel
//! values; images off the 8-bit grid go through an exact rank-histogram path.

use rayon::prelude::*;

use super::{map_index, Border};

const FINE: usize = 256;
const COARSE: usize = 16;

/// Constant-time median of one 8-bit plane.
pub(crate) fn median_u8(src: &[u8], w: usize, h: usize, kernel: usize, border: Border) -> Vec<u8> {
    debug_assert_eq!(src.len(), w * h);
    debug_assert!(kernel % 2 == 1);
    let r = kernel / 2;
    let pw = w + 2 * r;
    let xs: Vec<usize> = (0..pw).map(|j| map_index(j as isize - r as isize, w, border)).collect();
    let ys: Vec<usize> = (0..h + 2 * r).map(|j| map_index(j as isize - r as isize, h, border)).collect();
    let padded_row = |pr: usize| &src[ys[pr] * w..ys[pr] * w + w];

    let mut col_fine = vec![0u16; pw * FINE];
    let mut col_coarse = vec![0u16; pw * COARSE];
    let add_row = |row: &[u8], col_fine: &mut [u16], col_coarse: &mut [u16], sign: i32| {
        for (j, &sx) in xs.iter().enumerate() {
            let v = row[sx] as usize;
            let f = &mut col_fine[j * FINE + v];
            let c = &mut col_coarse[j * COARSE + (v >> 4)];
            if sign > 0 {
                *f += 1;
                *c += 1;
            } else {
                *f -= 1;
                *c -= 1;
            }
        }
    };
    for pr in 0..kernel {
        add_row(padded_row(pr), &mut col_fine, &mut col_coarse, 1);
    }

    let target = (kernel * kernel / 2) as u32;
    let mut out = vec![0u8; w * h];
    for y in 0..h {
        if y > 0 {
            add_row(padded_row(y - 1), &mut col_fine, &mut col_coarse, -1);
            add_row(padded_row(y + kernel - 1), &mut col_fine, &mut col_coarse, 1);
        }
        let mut coarse = [0u32; COARSE];
        let mut fine = [[0u32; COARSE]; COARSE];
        let mut valid_at = [usize::MAX; COARSE];
        for j in 0..kernel {
            for (k, c) in coarse.iter_mut().enumerate() {
                *c += u32::from(col_coarse[j * COARSE + k]);
            }
        }
        for x in 0..w {
            if x > 0 {
                let enter = (x + kernel - 1) * COARSE;
                let leave = (x - 1) * COARSE;
                for (k, c) in coarse.iter_mut().enumerate() {
                    *c = *c + u32::from(col_coarse[enter + k]) - u32::from(col_coarse[leave + k]);
                }
            }
            let mut acc = 0u32;
            let mut b = 0;
            while acc + coarse[b] <= target {
                acc += coarse[b];
                b += 1;
            }
            let bin = &mut fine[b];
            let last = valid_at[b];
            if last == usize::MAX || x - last >= kernel {
                *bin = [0; COARSE];
                for j in x..x + kernel {
                    let base = j * FINE + b * COARSE;
                    for (k, f) in bin.iter_mut().enumerate() {
                        *f += u32::from(col_fine[base + k]);
                    }
                }
            } else {
                for j in last..x {
                    let leave = j * FINE + b * COARSE;
                    let enter = (j + kernel) * FINE + b * COARSE;
                    for (k, f) in bin.iter_mut().enumerate() {
                        *f = *f + u32::from(col_fine[enter + k]) - u32::from(col_fine[leave + k]);
                    }
                }
            }
            valid_at[b] = x;
            let mut k = 0;
            while acc + bin[k] <= target {
                acc += bin[k];
                k += 1;
            }
            out[y * w + x] = (b * COARSE + k) as u8;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn window_values(src: &[f32], w: usize, h: usize, x: usize, y: usize, r: usize, border: Border, buf: &mut Vec<f32>) {
    buf.clear();
    for dy in -(r as isize)..=r as isize {
        let sy = map_index(y as isize + dy, h, border);
        for dx in -(r as isize)..=r as isize {
            let sx = map_index(x as isize + dx, w, border);
            buf.push(src[sy * w + sx]);
        }
    }
}

/// Exact median for planes that are not on the 8-bit grid.
///
/// Values are replaced by their dense rank, and each row slides one window
/// histogram over the ranks (Huang's scheme), split into `sqrt(N)` blocks so
/// the median search costs `O(sqrt(N))`. Per pixel the cost is `O(kernel)`
/// for the entering and leaving columns.
pub(crate) fn median_ranked(src: &[f32], w: usize, h: usize, kernel: usize, border: Border) -> Vec<f32> {
    let mut order: Vec<usize> = (0..src.len()).collect();
    order.sort_unstable_by(|&a, &b| src[a].total_cmp(&src[b]));
    let mut ranks = vec![0u32; src.len()];
    let mut values: Vec<f32> = Vec::new();
    for &i in &order {
        if values.last().is_none_or(|v| v.total_cmp(&src[i]).is_ne()) {
            values.push(src[i]);
        }
        ranks[i] = (values.len() - 1) as u32;
    }
    let n = values.len();
    let block = (n as f64).sqrt().ceil().max(1.0) as usize;
    let blocks = n.div_ceil(block);
    let r = kernel / 2;
    let xs: Vec<usize> = (0..w + 2 * r).map(|j| map_index(j as isize - r as isize, w, border)).collect();
    let mid = (kernel * kernel / 2) as u32;

    (0..h)
        .into_par_iter()
        .flat_map_iter(|y| {
            let rows: Vec<usize> = (0..kernel).map(|d| map_index(y as isize + d as isize - r as isize, h, border)).collect();
            let mut fine = vec![0u32; n];
            let mut coarse = vec![0u32; blocks];
            let column = |px: usize, fine: &mut [u32], coarse: &mut [u32], add: bool| {
                let sx = xs[px];
                for &sy in &rows {
                    let v = ranks[sy * w + sx] as usize;
                    if add {
                        fine[v] += 1;
                        coarse[v / block] += 1;
                    } else {
                        fine[v] -= 1;
                        coarse[v / block] -= 1;
                    }
                }
            };
            for px in 0..kernel {
                column(px, &mut fine, &mut coarse, true);
            }
            let mut out = Vec::with_capacity(w);
            for x in 0..w {
                if x > 0 {
                    column(x - 1, &mut fine, &mut coarse, false);
                    column(x + kernel - 1, &mut fine, &mut coarse, true);
                }
                let mut seen = 0u32;
                let mut b = 0;
                while seen + coarse[b] <= mid {
                    seen += coarse[b];
                    b += 1;
                }
                let mut v = b * block;
                while seen + fine[v] <= mid {
                    seen += fine[v];
                    v += 1;
                }
                out.push(values[v]);
            }
            out
        })
        .collect()
}

/// Brute-force reference: sort every window and take the middle element.
pub(crate) fn median_sort(src: &[f32], w: usize, h: usize, kernel: usize, border: Border) -> Vec<f32> {
    let r = kernel / 2;
    let mut out = Vec::with_capacity(w * h);
    let mut buf = Vec::with_capacity(kernel * kernel);
    for y in 0..h {
        for x in 0..w {
            window_values(src, w, h, x, y, r, border, &mut buf);
            buf.sort_by(f32::total_cmp);
            out.push(buf[buf.len() / 2]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn to_f32(p: &[u8]) -> Vec<f32> {
        p.iter().map(|&v| f32::from(v)).collect()
    }

    #[test]
    fn histogram_median_matches_sort_on_wide_value_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(w, h, k) in &[(1, 1, 3), (2, 7, 5), (13, 9, 3), (20, 20, 9), (9, 31, 15), (40, 12, 41)] {
            for border in [Border::Reflect, Border::Replicate] {
                let src: Vec<u8> = (0..w * h).map(|_| rng.random()).collect();
                let fast = median_u8(&src, w, h, k, border);
                let slow = median_sort(&to_f32(&src), w, h, k, border);
                assert_eq!(to_f32(&fast), slow, "w={w} h={h} k={k} {border:?}");
            }
        }
    }

    #[test]
    fn histogram_median_handles_skewed_values() {
        // Values concentrated in one coarse bucket and at the extremes.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (w, h, k) = (33, 17, 7);
        let src: Vec<u8> = (0..w * h)
            .map(|_| match rng.random_range(0..3) {
                0 => 0,
                1 => 255,
                _ => rng.random_range(96..112),
            })
            .collect();
        let fast = median_u8(&src, w, h, k, Border::Reflect);
        assert_eq!(to_f32(&fast), median_sort(&to_f32(&src), w, h, k, Border::Reflect));
    }

    #[test]
    fn ranked_matches_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(w, h, k) in &[(15, 11, 5), (1, 1, 3), (4, 9, 7), (23, 6, 21)] {
            for border in [Border::Reflect, Border::Replicate] {
                // Ties and signed zeros alongside arbitrary floats.
                let src: Vec<f32> = (0..w * h)
                    .map(|_| match rng.random_range(0..4) {
                        0 => 0.25,
                        1 => -0.0,
                        _ => rng.random(),
                    })
                    .collect();
                let fast = median_ranked(&src, w, h, k, border);
                let slow = median_sort(&src, w, h, k, border);
                assert!(fast.iter().zip(&slow).all(|(a, b)| a.to_bits() == b.to_bits()), "w={w} h={h} k={k} {border:?}");
            }
        }
    }

    #[test]
    fn center_pixel_is_fifth_smallest() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut vals: Vec<u8> = (0..=255).collect();
        for i in (1..vals.len()).rev() {
            vals.swap(i, rng.random_range(0..=i));
        }
        let src = &vals[..25];
        let out = median_u8(src, 5, 5, 3, Border::Reflect);
        let mut window: Vec<u8> = (1..4).flat_map(|y| (1..4).map(move |x| src[y * 5 + x])).collect();
        window.sort();
        assert_eq!(out[2 * 5 + 2], window[4]);
    }
}
