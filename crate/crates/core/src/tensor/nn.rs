//! Normalization ops: softmax, layer norm, per-lane L2 normalization.

use super::{axis_split, invalid, shape_err, Result, Tensor, TensorError, Var, DIV_EPS, LAYERNORM_EPS};

fn check_nan(op: &'static str, t: &Tensor) -> Result<()> {
    if cfg!(debug_assertions) && t.data().iter().any(|v| v.is_nan()) {
        return Err(TensorError::NaN { op });
    }
    Ok(())
}

impl<'t> Var<'t> {
    /// Max-stabilized softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.ndim() {
            return Err(invalid("softmax", format!("axis {axis} of {:?}", x.shape())));
        }
        check_nan("softmax", &x)?;
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let mut y = vec![0.0; x.numel()];
        let xd = x.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| xd[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (xd[at(k)] - m).exp();
                    y[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    y[at(k)] /= z;
                }
            }
        }
        let y = Tensor::new(x.shape(), y)?;
        let ys = y.clone();
        let a = self.id();
        Ok(self.tape().push(y, &[self], move |g, s| {
            if !s.wants(a) {
                return;
            }
            let ga = s.slot(a);
            let yd = ys.data();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * len + k) * inner + i;
                    let dot: f64 = (0..len).map(|k| g[at(k)] * yd[at(k)]).sum();
                    for k in 0..len {
                        ga[at(k)] += yd[at(k)] * (g[at(k)] - dot);
                    }
                }
            }
        }))
    }

    /// Layer normalization over the last axis followed by `gain ⊙ x̂ + bias`.
    pub fn layernorm(self, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&gain)?;
        self.same_tape(&bias)?;
        let x = self.value();
        let c = *x.shape().last().ok_or_else(|| invalid("layernorm", "scalar input"))?;
        if c < 2 {
            return Err(invalid("layernorm", "needs at least 2 channels"));
        }
        let (gv, bv) = (gain.value(), bias.value());
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(shape_err("layernorm", x.shape(), gv.shape()));
        }
        let rows = x.numel() / c;
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut y = vec![0.0; x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYERNORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                y[r * c + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let y = Tensor::new(x.shape(), y)?;
        let (ix, ig, ib) = (self.id(), gain.id(), bias.id());
        Ok(self.tape().push(y, &[self, gain, bias], move |g, s| {
            if s.wants(ig) {
                let gg = s.slot(ig);
                for r in 0..rows {
                    for j in 0..c {
                        gg[j] += g[r * c + j] * xhat[r * c + j];
                    }
                }
            }
            if s.wants(ib) {
                let gb = s.slot(ib);
                for r in 0..rows {
                    for j in 0..c {
                        gb[j] += g[r * c + j];
                    }
                }
            }
            if s.wants(ix) {
                let gx = s.slot(ix);
                let mut gh = vec![0.0; c];
                for r in 0..rows {
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..c {
                        gh[j] = g[r * c + j] * gv.data()[j];
                        m1 += gh[j];
                        m2 += gh[j] * xhat[r * c + j];
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    for j in 0..c {
                        gx[r * c + j] += inv_std[r] * (gh[j] - m1 - xhat[r * c + j] * m2);
                    }
                }
            }
        }))
    }

    /// Scale each lane along `axis` to unit L2 norm (`x / max(‖x‖, 1e-8)`).
    pub fn l2_normalize(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.ndim() {
            return Err(invalid("l2_normalize", format!("axis {axis} of {:?}", x.shape())));
        }
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let mut y = vec![0.0; x.numel()];
        let mut norms = vec![0.0; outer * inner];
        let xd = x.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let n = (0..len).map(|k| xd[at(k)] * xd[at(k)]).sum::<f64>().sqrt();
                let d = n.max(DIV_EPS);
                norms[o * inner + i] = n;
                for k in 0..len {
                    y[at(k)] = xd[at(k)] / d;
                }
            }
        }
        let y = Tensor::new(x.shape(), y)?;
        let ys = y.clone();
        let a = self.id();
        Ok(self.tape().push(y, &[self], move |g, s| {
            if !s.wants(a) {
                return;
            }
            let ga = s.slot(a);
            let yd = ys.data();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * len + k) * inner + i;
                    let n = norms[o * inner + i];
                    if n > DIV_EPS {
                        let dot: f64 = (0..len).map(|k| g[at(k)] * yd[at(k)]).sum();
                        for k in 0..len {
                            ga[at(k)] += (g[at(k)] - yd[at(k)] * dot) / n;
                        }
                    } else {
                        for k in 0..len {
                            ga[at(k)] += g[at(k)] / DIV_EPS;
                        }
                    }
                }
            }
        }))
    }
}
