use crate::tensor::{invalid, Result, Tensor, TensorError, Var, DIV_EPS};

use super::{LossTerm, ValidityMask};

/// Number of pyramid levels used by [`msg_loss`] by default.
pub const MSG_SCALES: usize = 4;

fn dims(op: &'static str, p: &Var<'_>, mask: &ValidityMask) -> Result<(usize, usize, usize, usize)> {
    match p.shape()[..] {
        [n, c, h, w] if (n, h, w) == (mask.views(), mask.height(), mask.width()) => Ok((n, c, h, w)),
        ref s => Err(invalid(
            op,
            format!(
                "map {s:?} does not match mask {}x{}x{}",
                mask.views(),
                mask.height(),
                mask.width()
            ),
        )),
    }
}

fn zero<'t>(like: Var<'t>) -> Var<'t> {
    like.tape().constant(Tensor::scalar(0.0))
}

/// Mean of `(p − target)²` over valid pixels and all channels.
pub fn mse_loss<'t>(p: Var<'t>, target: Var<'t>, mask: &ValidityMask) -> Result<LossTerm<'t>> {
    let (_, c, _, _) = dims("mse_loss", &p, mask)?;
    let count = mask.count();
    if count == 0 {
        return Ok(LossTerm::warn(zero(p), "mse_loss: no valid pixels"));
    }
    let w = p.tape().constant(mask.weights(c));
    let value = p
        .sub(target)?
        .square()
        .mul(w)?
        .sum_all()
        .scale(1.0 / (count * c) as f64);
    Ok(LossTerm::ok(value))
}

/// Squared forward-difference mismatch of `d = p − target` at one scale,
/// summed over pairs whose two pixels are both valid.
fn gradient_sq_sum<'t>(d: Var<'t>, mask: &ValidityMask) -> Result<Var<'t>> {
    let [n, c, h, w] = <[usize; 4]>::try_from(d.shape()).expect("4-d map");
    let tape = d.tape();
    let gx = d.narrow(3, 1, w - 1)?.sub(d.narrow(3, 0, w - 1)?)?;
    let wx = Tensor::from_fn(&[n, c, h, w - 1], |i| {
        let ok = mask.get(i[0], i[2], i[3]) && mask.get(i[0], i[2], i[3] + 1);
        if ok { 1.0 } else { 0.0 }
    });
    let gy = d.narrow(2, 1, h - 1)?.sub(d.narrow(2, 0, h - 1)?)?;
    let wy = Tensor::from_fn(&[n, c, h - 1, w], |i| {
        let ok = mask.get(i[0], i[2], i[3]) && mask.get(i[0], i[2] + 1, i[3]);
        if ok { 1.0 } else { 0.0 }
    });
    gx.square()
        .mul(tape.constant(wx))?
        .sum_all()
        .add(gy.square().mul(tape.constant(wy))?.sum_all())
}

/// Multi-scale gradient loss over a factor-2 bilinear pyramid of
/// `scales` levels (level 0 is full resolution). Each level contributes its
/// squared gradient mismatch divided by its valid pixel count times the
/// channel count; levels are averaged.
pub fn msg_loss<'t>(
    p: Var<'t>,
    target: Var<'t>,
    mask: &ValidityMask,
    scales: usize,
) -> Result<LossTerm<'t>> {
    if scales == 0 {
        return Err(invalid("msg_loss", "at least one scale required"));
    }
    let (_, c, h, w) = dims("msg_loss", &p, mask)?;
    let mut d = p.sub(target)?;
    let mut m = mask.clone();
    let mut warnings = Vec::new();
    let mut levels = Vec::new();
    for l in 0..scales {
        let (hl, wl) = (h >> l, w >> l);
        if hl < 2 || wl < 2 {
            warnings.push(format!("msg_loss: scale {l} smaller than 2x2, skipped"));
            break;
        }
        if l > 0 {
            d = d.bilinear_resize(hl, wl)?;
            m = m.downsample2();
        }
        let count = m.count();
        if count == 0 {
            warnings.push(format!("msg_loss: no valid pixels at scale {l}"));
            continue;
        }
        levels.push(gradient_sq_sum(d, &m)?.scale(1.0 / (count * c) as f64));
    }
    let value = match levels.len() {
        0 => zero(p),
        k => {
            let mut acc = levels[0];
            for v in &levels[1..] {
                acc = acc.add(*v)?;
            }
            acc.scale(1.0 / k as f64)
        }
    };
    Ok(LossTerm { value, warnings })
}

/// Per-view, per-channel least-squares scales `s` with `s·A ≈ A*` over
/// valid pixels, clamped to `s ≥ 0`. Channels with `Σ A² < 1e-8` fall back
/// to 1.
pub fn scale_align(a: &Tensor, target: &Tensor, mask: &ValidityMask) -> Result<Vec<[f64; 3]>> {
    let (n, h, w) = (mask.views(), mask.height(), mask.width());
    if a.shape() != [n, 3, h, w] || target.shape() != a.shape() {
        return Err(invalid(
            "scale_align",
            format!("expected [{n},3,{h},{w}], got {:?} and {:?}", a.shape(), target.shape()),
        ));
    }
    let plane = h * w;
    let bits = mask.bits();
    Ok((0..n)
        .map(|v| {
            std::array::from_fn(|c| {
                let off = (v * 3 + c) * plane;
                let (mut num, mut den) = (0.0, 0.0);
                for px in 0..plane {
                    if bits[v * plane + px] {
                        let x = a.data()[off + px];
                        num += x * target.data()[off + px];
                        den += x * x;
                    }
                }
                if den < DIV_EPS {
                    1.0
                } else {
                    (num / den).max(0.0)
                }
            })
        })
        .collect())
}

/// MSE between the scale-aligned prediction `A ⊙ s` and `A*`. The scales
/// are treated as constants: at the optimum their derivative does not
/// contribute to the gradient.
pub fn scale_invariant_albedo_loss<'t>(
    a: Var<'t>,
    target: Var<'t>,
    mask: &ValidityMask,
) -> Result<LossTerm<'t>> {
    let (n, _, h, w) = dims("scale_invariant_albedo_loss", &a, mask)?;
    let s = scale_align(&a.value(), &target.value(), mask)?;
    let plane = h * w;
    let sv = Tensor::from_fn(&[n, 3, h, w], |i| s[i[0]][i[1]]);
    debug_assert_eq!(sv.numel(), n * 3 * plane);
    let aligned = a.mul(a.tape().constant(sv))?;
    mse_loss(aligned, target, mask)
}

/// Tolerance on `‖n‖ − 1` accepted by [`normal_loss`] in debug builds.
pub const UNIT_TOL: f64 = 1e-3;

/// Mean over valid pixels of `1 − ⟨n̂, n⟩`.
pub fn normal_loss<'t>(pred: Var<'t>, target: Var<'t>, mask: &ValidityMask) -> Result<LossTerm<'t>> {
    let (n, c, h, w) = dims("normal_loss", &pred, mask)?;
    if c != 3 {
        return Err(invalid("normal_loss", format!("expected 3 channels, got {c}")));
    }
    if cfg!(debug_assertions) {
        for (name, t) in [("prediction", pred.value()), ("target", target.value())] {
            check_unit(name, &t, mask)?;
        }
    }
    let count = mask.count();
    if count == 0 {
        return Ok(LossTerm::warn(zero(pred), "normal_loss: no valid pixels"));
    }
    let dot = pred.mul(target)?.sum_axis(1, false)?;
    let wts = pred.tape().constant(mask.weights(1).reshape(&[n, h, w])?);
    let value = dot
        .neg()
        .add_scalar(1.0)
        .mul(wts)?
        .sum_all()
        .scale(1.0 / count as f64);
    Ok(LossTerm::ok(value))
}

fn check_unit(name: &str, t: &Tensor, mask: &ValidityMask) -> Result<()> {
    let (h, w) = (mask.height(), mask.width());
    let plane = h * w;
    for v in 0..mask.views() {
        for px in 0..plane {
            if !mask.bits()[v * plane + px] {
                continue;
            }
            let norm = (0..3)
                .map(|c| t.data()[(v * 3 + c) * plane + px].powi(2))
                .sum::<f64>()
                .sqrt();
            if (norm - 1.0).abs() > UNIT_TOL {
                return Err(TensorError::Contract(format!(
                    "normal_loss: {name} normal at view {v} pixel {px} has norm {norm}"
                )));
            }
        }
    }
    Ok(())
}
