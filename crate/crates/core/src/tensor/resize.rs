//! Bilinear resampling: resize (align-corners = false) and point sampling.

use super::{invalid, Result, Tensor, Var};

/// For each of `out_n` target samples, the two source indices and the weight
/// of the second one, using pixel-center alignment (align-corners = false).
pub fn bilinear_taps(in_n: usize, out_n: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_n as f64 / out_n as f64;
    (0..out_n)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_n - 1);
            let i1 = (i0 + 1).min(in_n - 1);
            let w = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, w)
        })
        .collect()
}

fn resize_planes(
    src: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
) -> Vec<f64> {
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    let mut out = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        let s = &src[p * h * w..(p + 1) * h * w];
        let o = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let top = s[y0 * w + x0] * (1.0 - wx) + s[y0 * w + x1] * wx;
                let bot = s[y1 * w + x0] * (1.0 - wx) + s[y1 * w + x1] * wx;
                o[oy * wo + ox] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

fn spatial_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(invalid(op, format!("needs at least 2 dims, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Ok((t.numel() / (h * w), h, w))
}

/// Non-differentiable bilinear resize of the last two axes.
pub fn bilinear_resize_plain(x: &Tensor, ho: usize, wo: usize) -> Result<Tensor> {
    if ho == 0 || wo == 0 {
        return Err(invalid("bilinear_resize", "target extent must be >= 1"));
    }
    let (planes, h, w) = spatial_dims("bilinear_resize", x)?;
    let out = resize_planes(x.data(), planes, (h, w), (ho, wo));
    let mut shape = x.shape().to_vec();
    let nd = shape.len();
    shape[nd - 2] = ho;
    shape[nd - 1] = wo;
    Tensor::new(&shape, out)
}

impl<'t> Var<'t> {
    /// Bilinear resize of the last two axes to `ho × wo`.
    pub fn bilinear_resize(self, ho: usize, wo: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (planes, h, w) = spatial_dims("bilinear_resize", &x)?;
        if (h, w) == (ho, wo) {
            return Ok(self);
        }
        let out = bilinear_resize_plain(&x, ho, wo)?;
        let a = self.id();
        Ok(self.tape().push(out, &[self], move |g, s| {
            if !s.wants(a) {
                return;
            }
            let ty = bilinear_taps(h, ho);
            let tx = bilinear_taps(w, wo);
            let ga = s.slot(a);
            for p in 0..planes {
                let d = &mut ga[p * h * w..(p + 1) * h * w];
                let gp = &g[p * ho * wo..(p + 1) * ho * wo];
                for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                        let v = gp[oy * wo + ox];
                        d[y0 * w + x0] += v * (1.0 - wy) * (1.0 - wx);
                        d[y0 * w + x1] += v * (1.0 - wy) * wx;
                        d[y1 * w + x0] += v * wy * (1.0 - wx);
                        d[y1 * w + x1] += v * wy * wx;
                    }
                }
            }
        }))
    }

    /// Sample a `[C, H, W]` map at continuous index-space positions
    /// `coords = [2, Ho, Wo]` (x then y). Positions with `valid[i] == false`
    /// produce 0; valid positions must lie in `[0, W-1] × [0, H-1]`.
    pub fn sample_bilinear(self, coords: &Tensor, valid: &[bool]) -> Result<Var<'t>> {
        let x = self.value();
        let (c, h, w) = match x.shape() {
            &[c, h, w] => (c, h, w),
            s => return Err(invalid("sample_bilinear", format!("expected [C,H,W], got {s:?}"))),
        };
        let (ho, wo) = match coords.shape() {
            &[2, ho, wo] => (ho, wo),
            s => return Err(invalid("sample_bilinear", format!("coords must be [2,H,W], got {s:?}"))),
        };
        if valid.len() != ho * wo {
            return Err(invalid("sample_bilinear", "validity length mismatch"));
        }
        let np = ho * wo;
        // per output pixel: 4 flat source offsets + 4 weights
        let mut taps: Vec<Option<([usize; 4], [f64; 4])>> = Vec::with_capacity(np);
        for i in 0..np {
            if !valid[i] {
                taps.push(None);
                continue;
            }
            let sx = coords.data()[i];
            let sy = coords.data()[np + i];
            if !(0.0..=(w - 1) as f64).contains(&sx) || !(0.0..=(h - 1) as f64).contains(&sy) {
                return Err(invalid(
                    "sample_bilinear",
                    format!("position ({sx}, {sy}) outside {w}x{h}"),
                ));
            }
            let x0 = (sx.floor() as usize).min(w - 1);
            let y0 = (sy.floor() as usize).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            taps.push(Some((
                [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
                [
                    (1.0 - fx) * (1.0 - fy),
                    fx * (1.0 - fy),
                    (1.0 - fx) * fy,
                    fx * fy,
                ],
            )));
        }
        let mut out = vec![0.0; c * np];
        for ch in 0..c {
            let plane = &x.data()[ch * h * w..(ch + 1) * h * w];
            for (i, t) in taps.iter().enumerate() {
                if let Some((idx, wt)) = t {
                    out[ch * np + i] = (0..4).map(|q| plane[idx[q]] * wt[q]).sum();
                }
            }
        }
        let out = Tensor::new(&[c, ho, wo], out)?;
        let a = self.id();
        Ok(self.tape().push(out, &[self], move |g, s| {
            if !s.wants(a) {
                return;
            }
            let ga = s.slot(a);
            for ch in 0..c {
                for (i, t) in taps.iter().enumerate() {
                    if let Some((idx, wt)) = t {
                        let v = g[ch * np + i];
                        for q in 0..4 {
                            ga[ch * h * w + idx[q]] += v * wt[q];
                        }
                    }
                }
            }
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_map_stays_constant() {
        let x = Tensor::full(&[2, 5, 3], 0.25);
        for (ho, wo) in [(1, 1), (7, 2), (10, 6)] {
            let y = bilinear_resize_plain(&x, ho, wo).unwrap();
            assert!(y.data().iter().all(|v| (v - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn symmetric_average() {
        let x = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let y = bilinear_resize_plain(&x, 1, 1).unwrap();
        assert_eq!(y.data(), &[0.5]);
    }

    #[test]
    fn upsample_matches_pixel_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_fn(&[1, 4, 4], |_| rng.gen::<f64>());
        let y = bilinear_resize_plain(&x, 7, 7).unwrap();
        for oy in 0..7 {
            for ox in 0..7 {
                let sy = ((oy as f64 + 0.5) * 4.0 / 7.0 - 0.5).clamp(0.0, 3.0);
                let sx = ((ox as f64 + 0.5) * 4.0 / 7.0 - 0.5).clamp(0.0, 3.0);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(3), (x0 + 1).min(3));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                let want = x.get(&[0, y0, x0]) * (1.0 - fy) * (1.0 - fx)
                    + x.get(&[0, y0, x1]) * (1.0 - fy) * fx
                    + x.get(&[0, y1, x0]) * fy * (1.0 - fx)
                    + x.get(&[0, y1, x1]) * fy * fx;
                assert!((y.get(&[0, oy, ox]) - want).abs() < 1e-12);
            }
        }
    }
}
