use super::{invalid, shape_err, Result, Tensor, Var};

/// Strided view description for [`gemm`]: (row stride, column stride).
pub type Strides = (isize, isize);

/// `c = beta * c + a · b` for an `m×k` by `k×n` product with arbitrary
/// strides (so transposes are free).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    beta: f64,
    c: &mut [f64],
    sc: Strides,
) {
    fn span(rows: usize, cols: usize, (rs, cs): Strides) -> usize {
        if rows == 0 || cols == 0 {
            return 0;
        }
        (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
    }
    assert!(span(m, k, sa) <= a.len(), "gemm: lhs buffer too small");
    assert!(span(k, n, sb) <= b.len(), "gemm: rhs buffer too small");
    assert!(span(m, n, sc) <= c.len(), "gemm: output buffer too small");
    assert!(sa.0 >= 0 && sa.1 >= 0 && sb.0 >= 0 && sb.1 >= 0 && sc.0 >= 0 && sc.1 >= 0);
    // SAFETY: the asserts above bound every strided access inside the slices,
    // and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            beta,
            c.as_mut_ptr(),
            sc.0,
            sc.1,
        );
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        &[r, c] => Ok((r, c)),
        s => Err(invalid(op, format!("expected a matrix, got {s:?}"))),
    }
}

fn dims3(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[b, r, c] => Ok((b, r, c)),
        s => Err(invalid(op, format!("expected [B, rows, cols], got {s:?}"))),
    }
}

impl<'t> Var<'t> {
    /// `[m, k] · [k, n] -> [m, n]`.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        let (a, b) = (self.value(), rhs.value());
        let (m, k) = dims2("matmul", &a)?;
        let (k2, n) = dims2("matmul", &b)?;
        if k != k2 {
            return Err(shape_err("matmul", a.shape(), b.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            a.data(),
            (k as isize, 1),
            b.data(),
            (n as isize, 1),
            0.0,
            &mut out,
            (n as isize, 1),
        );
        let out = Tensor::new(&[m, n], out)?;
        let (ia, ib) = (self.id(), rhs.id());
        Ok(self.tape().push(out, &[self, rhs], move |g, s| {
            if s.wants(ia) {
                // dA = dC · Bᵀ
                gemm(
                    m,
                    n,
                    k,
                    g,
                    (n as isize, 1),
                    b.data(),
                    (1, n as isize),
                    1.0,
                    s.slot(ia),
                    (k as isize, 1),
                );
            }
            if s.wants(ib) {
                // dB = Aᵀ · dC
                gemm(
                    k,
                    m,
                    n,
                    a.data(),
                    (1, k as isize),
                    g,
                    (n as isize, 1),
                    1.0,
                    s.slot(ib),
                    (n as isize, 1),
                );
            }
        }))
    }

    /// Batched product `[B, m, k] · [B, k, n]`, or `[B, m, k] · [B, n, k]ᵀ`
    /// when `transpose_rhs` is set.
    pub fn bmm(self, rhs: Var<'t>, transpose_rhs: bool) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        let (a, b) = (self.value(), rhs.value());
        let (bt, m, k) = dims3("bmm", &a)?;
        let (bt2, r1, r2) = dims3("bmm", &b)?;
        let (k2, n) = if transpose_rhs { (r2, r1) } else { (r1, r2) };
        if bt != bt2 || k != k2 {
            return Err(shape_err("bmm", a.shape(), b.shape()));
        }
        // strides of the logical k×n rhs inside one batch slab
        let sb: (isize, isize) = if transpose_rhs {
            (1, k as isize)
        } else {
            (n as isize, 1)
        };
        let mut out = vec![0.0; bt * m * n];
        for (i, c) in out.chunks_mut(m * n).enumerate() {
            gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..(i + 1) * m * k],
                (k as isize, 1),
                &b.data()[i * k * n..(i + 1) * k * n],
                sb,
                0.0,
                c,
                (n as isize, 1),
            );
        }
        let out = Tensor::new(&[bt, m, n], out)?;
        let (ia, ib) = (self.id(), rhs.id());
        Ok(self.tape().push(out, &[self, rhs], move |g, s| {
            if s.wants(ia) {
                let ga = s.slot(ia);
                for i in 0..bt {
                    // dA = dC · Bᵀ, Bᵀ has strides (sb.1, sb.0)
                    gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..(i + 1) * m * n],
                        (n as isize, 1),
                        &b.data()[i * k * n..(i + 1) * k * n],
                        (sb.1, sb.0),
                        1.0,
                        &mut ga[i * m * k..(i + 1) * m * k],
                        (k as isize, 1),
                    );
                }
            }
            if s.wants(ib) {
                let gb = s.slot(ib);
                for i in 0..bt {
                    // dB = Aᵀ · dC written through the rhs layout
                    gemm(
                        k,
                        m,
                        n,
                        &a.data()[i * m * k..(i + 1) * m * k],
                        (1, k as isize),
                        &g[i * m * n..(i + 1) * m * n],
                        (n as isize, 1),
                        1.0,
                        &mut gb[i * k * n..(i + 1) * k * n],
                        sb,
                    );
                }
            }
        }))
    }
}
