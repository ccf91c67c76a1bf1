use crate::tensor::Tensor;

use super::{EvalError, Result};

/// PSNR reported when the images are (numerically) identical.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_pair(p: &Tensor, t: &Tensor) -> Result<(usize, usize, usize)> {
    if p.shape() != t.shape() {
        return Err(EvalError::Config(format!(
            "image shapes differ: {:?} vs {:?}",
            p.shape(),
            t.shape()
        )));
    }
    match *p.shape() {
        [c, h, w] => Ok((c, h, w)),
        [h, w] => Ok((1, h, w)),
        ref s => Err(EvalError::Config(format!("images must be [C,H,W] or [H,W], got {s:?}"))),
    }
}

/// Peak signal-to-noise ratio for unit dynamic range, capped at 99 dB.
pub fn psnr(p: &Tensor, t: &Tensor) -> Result<f64> {
    check_pair(p, t)?;
    let mse = p
        .data()
        .iter()
        .zip(t.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / p.numel() as f64;
    Ok(if mse < 1e-10 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    })
}

fn gaussian(size: usize) -> Vec<f64> {
    let mid = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of one `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = (0..k).map(|j| g[j] * x[y * w + ox + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..k).map(|j| g[j] * rows[(oy + j) * ow + ox]).sum();
        }
    }
    out
}

/// Mean SSIM over all fully-inside Gaussian windows and channels. Images
/// smaller than the window use a window as large as the shorter side.
pub fn ssim(p: &Tensor, t: &Tensor) -> Result<f64> {
    let (c, h, w) = check_pair(p, t)?;
    let size = SSIM_WINDOW.min(h).min(w);
    if size == 0 {
        return Err(EvalError::Config("empty image".into()));
    }
    let g = gaussian(size);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let x = &p.data()[ch * plane..(ch + 1) * plane];
        let y = &t.data()[ch * plane..(ch + 1) * plane];
        let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = filter_valid(x, h, w, &g);
        let my = filter_valid(y, h, w, &g);
        let sxx = filter_valid(&prod(x, x), h, w, &g);
        let syy = filter_valid(&prod(y, y), h, w, &g);
        let sxy = filter_valid(&prod(x, y), h, w, &g);
        for i in 0..mx.len() {
            let (a, b) = (mx[i], my[i]);
            let vx = sxx[i] - a * a;
            let vy = syy[i] - b * b;
            let cov = sxy[i] - a * b;
            total += ((2.0 * a * b + c1) * (2.0 * cov + c2)) / ((a * a + b * b + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub fn psnr_ssim(p: &Tensor, t: &Tensor) -> Result<(f64, f64)> {
    Ok((psnr(p, t)?, ssim(p, t)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, c: usize, h: usize, w: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[c, h, w], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn identical_images_cap_psnr_and_give_unit_ssim() {
        let a = random_image(1, 3, 16, 16);
        let (p, s) = psnr_ssim(&a, &a).unwrap();
        assert_eq!(p, PSNR_CAP_DB);
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mse_of_one_hundredth_is_twenty_db() {
        let a = Tensor::full(&[1, 4, 4], 0.5);
        let b = Tensor::full(&[1, 4, 4], 0.6);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    /// Windowed statistics computed directly per window position.
    fn ssim_oracle(p: &Tensor, t: &Tensor) -> f64 {
        let (c, h, w) = (p.shape()[0], p.shape()[1], p.shape()[2]);
        let k = 11;
        let sigma: f64 = 1.5;
        let mut wts = vec![vec![0.0; k]; k];
        let mut norm = 0.0;
        for (i, row) in wts.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
                norm += *v;
            }
        }
        let (c1, c2) = (1e-4, 9e-4);
        let mut acc = 0.0;
        let mut n = 0.0;
        for ch in 0..c {
            for y0 in 0..=h - k {
                for x0 in 0..=w - k {
                    let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..k {
                        for j in 0..k {
                            let wt = wts[i][j] / norm;
                            let a = p.get(&[ch, y0 + i, x0 + j]);
                            let b = t.get(&[ch, y0 + i, x0 + j]);
                            mx += wt * a;
                            my += wt * b;
                            xx += wt * a * a;
                            yy += wt * b * b;
                            xy += wt * a * b;
                        }
                    }
                    let (vx, vy, cv) = (xx - mx * mx, yy - my * my, xy - mx * my);
                    acc += (2.0 * mx * my + c1) * (2.0 * cv + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    n += 1.0;
                }
            }
        }
        acc / n
    }

    #[test]
    fn ssim_matches_windowed_oracle() {
        let a = random_image(2, 3, 20, 23);
        let b = a.zip_map(&random_image(3, 3, 20, 23), |x, y| 0.7 * x + 0.3 * y).unwrap();
        let got = ssim(&a, &b).unwrap();
        let want = ssim_oracle(&a, &b);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}
