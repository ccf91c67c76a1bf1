//! Elementwise, reduction and shape ops.

use super::{axis_split, invalid, shape_err, Result, Tensor, Var};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, a.shape(), b.shape()));
    }
    Ok(())
}

impl<'t> Var<'t> {
    fn unary(
        self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        // df(x, y) is dy/dx given input x and output y
        let x = self.value();
        let y = x.map(f);
        let (xs, ys) = (x, y.clone());
        let a = self.id();
        self.tape().push(y, &[self], move |g, s| {
            if !s.wants(a) {
                return;
            }
            let ga = s.slot(a);
            for i in 0..g.len() {
                ga[i] += g[i] * df(xs.data()[i], ys.data()[i]);
            }
        })
    }

    pub fn add(self, o: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&o)?;
        let (x, y) = (self.value(), o.value());
        same_shape("add", &x, &y)?;
        let out = x.zip_map(&y, |a, b| a + b)?;
        let (a, b) = (self.id(), o.id());
        Ok(self.tape().push(out, &[self, o], move |g, s| {
            s.accumulate(a, g);
            s.accumulate(b, g);
        }))
    }

    pub fn sub(self, o: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&o)?;
        let (x, y) = (self.value(), o.value());
        same_shape("sub", &x, &y)?;
        let out = x.zip_map(&y, |a, b| a - b)?;
        let (a, b) = (self.id(), o.id());
        Ok(self.tape().push(out, &[self, o], move |g, s| {
            s.accumulate(a, g);
            if s.wants(b) {
                for (d, v) in s.slot(b).iter_mut().zip(g) {
                    *d -= v;
                }
            }
        }))
    }

    pub fn mul(self, o: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&o)?;
        let (x, y) = (self.value(), o.value());
        same_shape("mul", &x, &y)?;
        let out = x.zip_map(&y, |a, b| a * b)?;
        let (a, b) = (self.id(), o.id());
        Ok(self.tape().push(out, &[self, o], move |g, s| {
            if s.wants(a) {
                for ((d, v), w) in s.slot(a).iter_mut().zip(g).zip(y.data()) {
                    *d += v * w;
                }
            }
            if s.wants(b) {
                for ((d, v), w) in s.slot(b).iter_mut().zip(g).zip(x.data()) {
                    *d += v * w;
                }
            }
        }))
    }

    pub fn div(self, o: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&o)?;
        let (x, y) = (self.value(), o.value());
        same_shape("div", &x, &y)?;
        let out = x.zip_map(&y, |a, b| a / b)?;
        let (a, b) = (self.id(), o.id());
        Ok(self.tape().push(out, &[self, o], move |g, s| {
            if s.wants(a) {
                for ((d, v), w) in s.slot(a).iter_mut().zip(g).zip(y.data()) {
                    *d += v / w;
                }
            }
            if s.wants(b) {
                let ga = s.slot(b);
                for i in 0..g.len() {
                    let w = y.data()[i];
                    ga[i] -= g[i] * x.data()[i] / (w * w);
                }
            }
        }))
    }

    /// `x + b` where `b`'s shape is a trailing suffix of `x`'s shape.
    pub fn add_bcast(self, b: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&b)?;
        let (x, bv) = (self.value(), b.value());
        let (xs, bs) = (x.shape(), bv.shape());
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(shape_err("add_bcast", xs, bs));
        }
        let nb = bv.numel();
        let out: Vec<f64> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv.data()[i % nb])
            .collect();
        let out = Tensor::new(xs, out)?;
        let (ia, ib) = (self.id(), b.id());
        Ok(self.tape().push(out, &[self, b], move |g, s| {
            s.accumulate(ia, g);
            if s.wants(ib) {
                let gb = s.slot(ib);
                for chunk in g.chunks(nb) {
                    for (d, v) in gb.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
            }
        }))
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        self.unary(move |x| k * x, move |_, _| k)
    }

    pub fn add_scalar(self, k: f64) -> Var<'t> {
        self.unary(move |x| x + k, |_, _| 1.0)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            |_, y| y * (1.0 - y),
        )
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        self.unary(
            |x| 0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh()),
            |x, _| {
                let u = C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            },
        )
    }

    pub fn sum_all(self) -> Var<'t> {
        let x = self.value();
        let n = x.numel();
        let a = self.id();
        self.tape().push(Tensor::scalar(x.sum()), &[self], move |g, s| {
            if s.wants(a) {
                let g0 = g[0];
                s.slot(a).iter_mut().take(n).for_each(|d| *d += g0);
            }
        })
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = self.numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum along `axis`; `keepdim` retains it with extent 1.
    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.ndim() {
            return Err(invalid("sum_axis", format!("axis {axis} of {:?}", x.shape())));
        }
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x.data()[base + i];
                }
            }
        }
        let mut shape = x.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        let out = if shape.is_empty() {
            Tensor::scalar(out[0])
        } else {
            Tensor::new(&shape, out)?
        };
        let a = self.id();
        Ok(self.tape().push(out, &[self], move |g, s| {
            if !s.wants(a) {
                return;
            }
            let ga = s.slot(a);
            for o in 0..outer {
                for k in 0..len {
                    let base = (o * len + k) * inner;
                    for i in 0..inner {
                        ga[base + i] += g[o * inner + i];
                    }
                }
            }
        }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        let a = self.id();
        Ok(self.tape().push(out, &[self], move |g, s| s.accumulate(a, g)))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let nd = x.ndim();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true))
        {
            return Err(invalid("permute", format!("{perm:?} for {:?}", x.shape())));
        }
        let in_strides = x.strides();
        let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
        let ps: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let n = x.numel();
        let mut src = Vec::with_capacity(n);
        let mut idx = vec![0usize; nd];
        let mut off = 0usize;
        for _ in 0..n {
            src.push(off);
            for d in (0..nd).rev() {
                idx[d] += 1;
                off += ps[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                off -= ps[d] * out_shape[d];
                idx[d] = 0;
            }
        }
        let data: Vec<f64> = src.iter().map(|&o| x.data()[o]).collect();
        let out = Tensor::new(&out_shape, data)?;
        let a = self.id();
        Ok(self.tape().push(out, &[self], move |g, s| {
            if !s.wants(a) {
                return;
            }
            let ga = s.slot(a);
            for (i, &o) in src.iter().enumerate() {
                ga[o] += g[i];
            }
        }))
    }

    /// Slice `len` entries from `start` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.ndim() || len == 0 || start + len > x.shape()[axis] {
            return Err(invalid(
                "narrow",
                format!("axis {axis} range {start}..{} of {:?}", start + len, x.shape()),
            ));
        }
        let (outer, full, inner) = axis_split(x.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(&shape, data)?;
        let a = self.id();
        Ok(self.tape().push(out, &[self], move |g, s| {
            if !s.wants(a) {
                return;
            }
            let ga = s.slot(a);
            for o in 0..outer {
                let base = (o * full + start) * inner;
                let gb = o * len * inner;
                for i in 0..len * inner {
                    ga[base + i] += g[gb + i];
                }
            }
        }))
    }

    /// Concatenate along `axis`.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = *parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let vals: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let base_shape = vals[0].shape().to_vec();
        if axis >= base_shape.len() {
            return Err(invalid("concat", format!("axis {axis} of {base_shape:?}")));
        }
        for (p, v) in parts.iter().zip(&vals) {
            first.same_tape(p)?;
            let s = v.shape();
            if s.len() != base_shape.len()
                || s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(shape_err("concat", &base_shape, s));
            }
        }
        let lens: Vec<usize> = vals.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = axis_split(&base_shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &l) in vals.iter().zip(&lens) {
                let base = o * l * inner;
                data.extend_from_slice(&v.data()[base..base + l * inner]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id()).collect();
        Ok(first.tape().push(out, parts, move |g, s| {
            let mut offset = 0;
            for (&id, &l) in ids.iter().zip(&lens) {
                if s.wants(id) {
                    let gi = s.slot(id);
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * l * inner;
                        for i in 0..l * inner {
                            gi[dst + i] += g[src + i];
                        }
                    }
                }
                offset += l;
            }
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn sum_gives_ones_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::from_fn(&[2, 3], |i| i[1] as f64));
        tape.backward(x.sum_all()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_sum_gives_twice_input() {
        let tape = Tape::new();
        let xv = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let x = tape.param(xv.clone());
        tape.backward(x.mul(x).unwrap().sum_all()).unwrap();
        assert_eq!(x.grad().unwrap(), xv.map(|v| 2.0 * v));
    }

    #[test]
    fn permute_matches_index_formula() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| {
            (i[0] * 100 + i[1] * 10 + i[2]) as f64
        }));
        let y = x.permute(&[2, 0, 1]).unwrap().value();
        assert_eq!(y.shape(), &[4, 2, 3]);
        for a in 0..4 {
            for b in 0..2 {
                for c in 0..3 {
                    assert_eq!(y.get(&[a, b, c]), (b * 100 + c * 10 + a) as f64);
                }
            }
        }
    }

    #[test]
    fn narrow_and_concat_invert() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 5, 3], |i| {
            (i[0] * 100 + i[1] * 10 + i[2]) as f64
        }));
        let a = x.narrow(1, 0, 2).unwrap();
        let b = x.narrow(1, 2, 3).unwrap();
        let y = crate::tensor::Var::concat(&[a, b], 1).unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        let msg = a.add(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }
}
