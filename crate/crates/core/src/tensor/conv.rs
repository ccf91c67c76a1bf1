//! 2-D cross-correlation with zero padding, via im2col + gemm.

use rayon::prelude::*;

use super::linalg::gemm;
use super::{invalid, shape_err, Result, Tensor, Var};

/// `floor((n + 2·pad − k) / stride) + 1`, or `None` when the kernel does not
/// fit the padded input.
pub fn conv2d_output_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if k > padded || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geom {
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.ci * self.k * self.k
    }
    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let p = self.cols();
        for c in 0..self.ci {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = ((c * self.k + ky) * self.k + kx) * p;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let dst = &mut cols[row + oy * self.wo..row + (oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &img[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let p = self.cols();
        for c in 0..self.ci {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = ((c * self.k + ky) * self.k + kx) * p;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = (c * self.h + iy as usize) * self.w;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                img[base + ix as usize] += cols[row + oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    /// Cross-correlation of `[N, Cin, H, W]` (or `[Cin, H, W]`) input with
    /// `[Cout, Cin, k, k]` weights, zero padding `pad`, and optional `[Cout]`
    /// bias.
    pub fn conv2d(
        self,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t>> {
        self.same_tape(&weight)?;
        let x = self.value();
        let wv = weight.value();
        let (n, ci, h, w, batched) = match x.shape() {
            &[n, c, h, w] => (n, c, h, w, true),
            &[c, h, w] => (1, c, h, w, false),
            s => return Err(invalid("conv2d", format!("expected [N,C,H,W], got {s:?}"))),
        };
        let (co, k) = match wv.shape() {
            &[co, c2, k1, k2] if c2 == ci && k1 == k2 => (co, k1),
            s => return Err(shape_err("conv2d", x.shape(), s)),
        };
        if k % 2 == 0 {
            return Err(invalid("conv2d", format!("kernel extent {k} must be odd")));
        }
        let (Some(ho), Some(wo)) = (
            conv2d_output_extent(h, k, stride, pad),
            conv2d_output_extent(w, k, stride, pad),
        ) else {
            return Err(invalid(
                "conv2d",
                format!("kernel {k}x{k} larger than padded input {h}x{w} (pad {pad})"),
            ));
        };
        let bv = match bias {
            Some(b) => {
                self.same_tape(&b)?;
                let v = b.value();
                if v.shape() != [co] {
                    return Err(shape_err("conv2d bias", &[co], v.shape()));
                }
                Some(v)
            }
            None => None,
        };
        let geom = Geom {
            ci,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let (kk, p) = (geom.rows(), geom.cols());
        let mut out = vec![0.0; n * co * p];
        out.par_chunks_mut(co * p)
            .enumerate()
            .for_each(|(img, o)| {
                let mut cols = vec![0.0; kk * p];
                geom.im2col(&x.data()[img * ci * h * w..(img + 1) * ci * h * w], &mut cols);
                if let Some(b) = &bv {
                    for (c, row) in o.chunks_mut(p).enumerate() {
                        row.fill(b.data()[c]);
                    }
                }
                gemm(
                    co,
                    kk,
                    p,
                    wv.data(),
                    (kk as isize, 1),
                    &cols,
                    (p as isize, 1),
                    1.0,
                    o,
                    (p as isize, 1),
                );
            });
        let shape: Vec<usize> = if batched {
            vec![n, co, ho, wo]
        } else {
            vec![co, ho, wo]
        };
        let out = Tensor::new(&shape, out)?;
        let (ix, iw, ib) = (self.id(), weight.id(), bias.map(|b| b.id()));
        let mut parents = vec![self, weight];
        parents.extend(bias);
        Ok(self.tape().push(out, &parents, move |g, s| {
            if let Some(ib) = ib {
                if s.wants(ib) {
                    let gb = s.slot(ib);
                    for img in 0..n {
                        for c in 0..co {
                            let base = (img * co + c) * p;
                            gb[c] += g[base..base + p].iter().sum::<f64>();
                        }
                    }
                }
            }
            if s.wants(iw) {
                let partials: Vec<Vec<f64>> = (0..n)
                    .into_par_iter()
                    .map(|img| {
                        let mut cols = vec![0.0; kk * p];
                        geom.im2col(&x.data()[img * ci * h * w..(img + 1) * ci * h * w], &mut cols);
                        let mut dw = vec![0.0; co * kk];
                        gemm(
                            co,
                            p,
                            kk,
                            &g[img * co * p..(img + 1) * co * p],
                            (p as isize, 1),
                            &cols,
                            (1, p as isize),
                            0.0,
                            &mut dw,
                            (kk as isize, 1),
                        );
                        dw
                    })
                    .collect();
                let gw = s.slot(iw);
                for dw in partials {
                    for (d, v) in gw.iter_mut().zip(&dw) {
                        *d += v;
                    }
                }
            }
            if s.wants(ix) {
                let gx = s.slot(ix);
                gx.par_chunks_mut(ci * h * w)
                    .enumerate()
                    .for_each(|(img, dx)| {
                        let mut dcols = vec![0.0; kk * p];
                        gemm(
                            kk,
                            co,
                            p,
                            wv.data(),
                            (1, kk as isize),
                            &g[img * co * p..(img + 1) * co * p],
                            (p as isize, 1),
                            0.0,
                            &mut dcols,
                            (p as isize, 1),
                        );
                        geom.col2im(&dcols, dx);
                    });
            }
        }))
    }
}
