//! Supervision terms for pretraining and the consistency finetuning
//! objective.

mod mask;
mod terms;

use serde::{Deserialize, Serialize};

use crate::model::{IntrinsicSet, IntrinsicVars};
use crate::tensor::{Result, Var};

pub use mask::{ValidityMask, ALBEDO_VALID_RANGE};
pub use terms::{
    mse_loss, msg_loss, normal_loss, scale_align, scale_invariant_albedo_loss, MSG_SCALES,
    UNIT_TOL,
};

/// A scalar loss plus any degenerate-input warnings raised while computing
/// it.
#[derive(Clone, Debug)]
pub struct LossTerm<'t> {
    pub value: Var<'t>,
    pub warnings: Vec<String>,
}

impl<'t> LossTerm<'t> {
    pub(crate) fn ok(value: Var<'t>) -> Self {
        Self {
            value,
            warnings: Vec::new(),
        }
    }

    pub(crate) fn warn(value: Var<'t>, msg: &str) -> Self {
        log::warn!("{msg}");
        Self {
            value,
            warnings: vec![msg.to_string()],
        }
    }

    pub fn item(&self) -> f64 {
        self.value.value().item()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub albedo: f64,
    pub metallic: f64,
    pub roughness: f64,
    pub normal: f64,
    pub shading: f64,
    pub anchor: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            albedo: 1.0,
            metallic: 1.0,
            roughness: 1.0,
            normal: 1.0,
            shading: 1.0,
            anchor: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let all = [
            self.albedo,
            self.metallic,
            self.roughness,
            self.normal,
            self.shading,
            self.anchor,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err("loss weights must be finite and nonnegative".into());
        }
        Ok(())
    }
}

/// Unweighted per-property values of one composite evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TermBreakdown {
    pub albedo: f64,
    pub metallic: f64,
    pub roughness: f64,
    pub normal: f64,
    pub shading: f64,
}

pub struct CompositeLoss<'t> {
    pub total: Var<'t>,
    pub terms: TermBreakdown,
    pub warnings: Vec<String>,
}

fn sum_terms<'t>(terms: &[LossTerm<'t>], warnings: &mut Vec<String>) -> Result<Var<'t>> {
    let mut acc = terms[0].value;
    for t in &terms[1..] {
        acc = acc.add(t.value)?;
    }
    for t in terms {
        warnings.extend(t.warnings.iter().cloned());
    }
    Ok(acc)
}

/// Weighted sum of the per-property losses. Albedo uses the scale-invariant
/// MSE plus MSG, or plain MSE plus MSG while `warmup` is set; metallic,
/// roughness and shading use MSE plus MSG; normals use the cosine loss.
pub fn composite_loss<'t>(
    pred: &IntrinsicVars<'t>,
    gt: &IntrinsicSet,
    w: &LossWeights,
    mask: &ValidityMask,
    warmup: bool,
) -> Result<CompositeLoss<'t>> {
    let tape = pred.albedo.tape();
    let mut warnings = Vec::new();
    let albedo_gt = tape.constant(gt.albedo.clone());
    let albedo_main = if warmup {
        mse_loss(pred.albedo, albedo_gt, mask)?
    } else {
        scale_invariant_albedo_loss(pred.albedo, albedo_gt, mask)?
    };
    let albedo = sum_terms(
        &[albedo_main, msg_loss(pred.albedo, albedo_gt, mask, MSG_SCALES)?],
        &mut warnings,
    )?;
    let mut dense = |p: Var<'t>, t: &crate::tensor::Tensor| -> Result<Var<'t>> {
        let t = tape.constant(t.clone());
        sum_terms(
            &[mse_loss(p, t, mask)?, msg_loss(p, t, mask, MSG_SCALES)?],
            &mut warnings,
        )
    };
    let metallic = dense(pred.metallic, &gt.metallic)?;
    let roughness = dense(pred.roughness, &gt.roughness)?;
    let shading = dense(pred.shading, &gt.shading)?;
    let normal_term = normal_loss(pred.normal, tape.constant(gt.normal.clone()), mask)?;
    warnings.extend(normal_term.warnings.iter().cloned());
    let normal = normal_term.value;

    let total = albedo
        .scale(w.albedo)
        .add(metallic.scale(w.metallic))?
        .add(roughness.scale(w.roughness))?
        .add(normal.scale(w.normal))?
        .add(shading.scale(w.shading))?;
    Ok(CompositeLoss {
        total,
        terms: TermBreakdown {
            albedo: albedo.value().item(),
            metallic: metallic.value().item(),
            roughness: roughness.value().item(),
            normal: normal.value().item(),
            shading: shading.value().item(),
        },
        warnings,
    })
}

/// Maps tied by the finetuning objective. Camera-space normals change with
/// the viewpoint and are not compared across frames.
pub const FINETUNE_CHANNELS: [&str; 4] = ["albedo", "metallic", "roughness", "shading"];

pub struct FinetuneLoss<'t> {
    pub total: Var<'t>,
    pub anchor: f64,
    pub consistency: f64,
    pub warnings: Vec<String>,
}

fn pick<'t>(set: &IntrinsicVars<'t>, name: &str) -> Var<'t> {
    set.maps()
        .into_iter()
        .find(|(n, _)| *n == name)
        .expect("known channel")
        .1
}

/// `λ_anchor · mean((m0 − m0_pret)²) + mean_valid((mt − m_warp)²)`, summed
/// over [`FINETUNE_CHANNELS`]. All sets hold a single view.
pub fn finetune_loss<'t>(
    m0: &IntrinsicVars<'t>,
    m0_pret: &IntrinsicSet,
    mt: &IntrinsicVars<'t>,
    m_warp: &IntrinsicVars<'t>,
    valid: &ValidityMask,
    lambda_anchor: f64,
) -> Result<FinetuneLoss<'t>> {
    let tape = m0.albedo.tape();
    let pret = tape.constant(m0_pret.albedo.clone());
    let pret_vars = IntrinsicVars {
        albedo: pret,
        metallic: tape.constant(m0_pret.metallic.clone()),
        roughness: tape.constant(m0_pret.roughness.clone()),
        normal: tape.constant(m0_pret.normal.clone()),
        shading: tape.constant(m0_pret.shading.clone()),
    };
    let mut warnings = Vec::new();
    let mut anchor_terms = Vec::new();
    let mut cons_terms = Vec::new();
    for name in FINETUNE_CHANNELS {
        anchor_terms.push(
            pick(m0, name)
                .sub(pick(&pret_vars, name))?
                .square()
                .mean_all(),
        );
        let c = mse_loss(pick(mt, name), pick(m_warp, name), valid)?;
        warnings.extend(c.warnings);
        cons_terms.push(c.value);
    }
    let add_all = |v: &[Var<'t>]| -> Result<Var<'t>> {
        let mut acc = v[0];
        for x in &v[1..] {
            acc = acc.add(*x)?;
        }
        Ok(acc)
    };
    let anchor = add_all(&anchor_terms)?;
    let consistency = add_all(&cons_terms)?;
    let total = anchor.scale(lambda_anchor).add(consistency)?;
    Ok(FinetuneLoss {
        total,
        anchor: anchor.value().item(),
        consistency: consistency.value().item(),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_map(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(0.05..0.95))
    }

    fn rand_mask(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> ValidityMask {
        ValidityMask::from_fn(n, h, w, |_, _, _| rng.gen_bool(0.7))
    }

    #[test]
    fn mse_trivial_cases() {
        let tape = Tape::new();
        let m = ValidityMask::full(2, 3, 3);
        let a = tape.constant(Tensor::ones(&[2, 1, 3, 3]));
        let z = tape.constant(Tensor::zeros(&[2, 1, 3, 3]));
        assert_eq!(mse_loss(a, a, &m).unwrap().item(), 0.0);
        assert_eq!(mse_loss(a, z, &m).unwrap().item(), 1.0);
    }

    #[test]
    fn mse_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (p, t) = (rand_map(&mut rng, &[2, 3, 5, 4]), rand_map(&mut rng, &[2, 3, 5, 4]));
        let m = rand_mask(&mut rng, 2, 5, 4);
        let tape = Tape::new();
        let got = mse_loss(tape.constant(p.clone()), tape.constant(t.clone()), &m)
            .unwrap()
            .item();
        let (mut acc, mut cnt) = (0.0, 0);
        for v in 0..2 {
            for c in 0..3 {
                for y in 0..5 {
                    for x in 0..4 {
                        if m.get(v, y, x) {
                            acc += (p.get(&[v, c, y, x]) - t.get(&[v, c, y, x])).powi(2);
                            cnt += 1;
                        }
                    }
                }
            }
        }
        assert!((got - acc / cnt as f64).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_gives_zero_with_warning() {
        let tape = Tape::new();
        let m = ValidityMask::new(1, 2, 2, vec![false; 4]);
        let a = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
        let z = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let t = mse_loss(a, z, &m).unwrap();
        assert_eq!(t.item(), 0.0);
        assert_eq!(t.warnings.len(), 1);
    }

    #[test]
    fn msg_vanishes_on_constants() {
        let tape = Tape::new();
        let m = ValidityMask::full(1, 8, 8);
        let a = tape.constant(Tensor::full(&[1, 2, 8, 8], 0.3));
        let b = tape.constant(Tensor::full(&[1, 2, 8, 8], 0.9));
        assert!(msg_loss(a, b, &m, 4).unwrap().item().abs() < 1e-15);
        assert_eq!(msg_loss(a, a, &m, 4).unwrap().item(), 0.0);
    }

    #[test]
    fn msg_matches_explicit_pyramid() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (p, t) = (rand_map(&mut rng, &[1, 1, 4, 4]), rand_map(&mut rng, &[1, 1, 4, 4]));
        let m = ValidityMask::full(1, 4, 4);
        let tape = Tape::new();
        let got = msg_loss(tape.constant(p.clone()), tape.constant(t.clone()), &m, 2)
            .unwrap()
            .item();

        let grad_sq = |a: &dyn Fn(usize, usize) -> f64, n: usize| -> f64 {
            let mut acc = 0.0;
            for y in 0..n {
                for x in 0..n {
                    if x + 1 < n {
                        acc += (a(y, x + 1) - a(y, x)).powi(2);
                    }
                    if y + 1 < n {
                        acc += (a(y + 1, x) - a(y, x)).powi(2);
                    }
                }
            }
            acc
        };
        let d0 = |y: usize, x: usize| p.get(&[0, 0, y, x]) - t.get(&[0, 0, y, x]);
        // factor-2 pixel-center downsample is the 2×2 block mean
        let d1 = |y: usize, x: usize| {
            (d0(2 * y, 2 * x) + d0(2 * y + 1, 2 * x) + d0(2 * y, 2 * x + 1) + d0(2 * y + 1, 2 * x + 1))
                / 4.0
        };
        let want = (grad_sq(&d0, 4) / 16.0 + grad_sq(&d1, 2) / 4.0) / 2.0;
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn msg_skips_tiny_scales() {
        let tape = Tape::new();
        let m = ValidityMask::full(1, 4, 4);
        let a = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let t = msg_loss(a, a, &m, 4).unwrap();
        assert_eq!(t.warnings.len(), 1);
    }

    #[test]
    fn scale_invariant_exact_rescale() {
        let tape = Tape::new();
        let m = ValidityMask::full(1, 3, 3);
        let a = Tensor::full(&[1, 3, 3, 3], 0.2);
        let t = Tensor::full(&[1, 3, 3, 3], 0.4);
        let s = scale_align(&a, &t, &m).unwrap();
        for c in 0..3 {
            assert!((s[0][c] - 2.0).abs() < 1e-12);
        }
        let l = scale_invariant_albedo_loss(tape.constant(a), tape.constant(t), &m).unwrap();
        assert!(l.item().abs() < 1e-15);
    }

    #[test]
    fn scale_invariant_two_step_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, t) = (rand_map(&mut rng, &[2, 3, 4, 4]), rand_map(&mut rng, &[2, 3, 4, 4]));
        let m = rand_mask(&mut rng, 2, 4, 4);
        let s = scale_align(&a, &t, &m).unwrap();
        let (mut loss, mut cnt) = (0.0, 0);
        for v in 0..2 {
            for c in 0..3 {
                let (mut num, mut den) = (0.0, 0.0);
                for y in 0..4 {
                    for x in 0..4 {
                        if m.get(v, y, x) {
                            num += a.get(&[v, c, y, x]) * t.get(&[v, c, y, x]);
                            den += a.get(&[v, c, y, x]).powi(2);
                        }
                    }
                }
                let sc = num / den;
                assert!((s[v][c] - sc).abs() < 1e-12);
                for y in 0..4 {
                    for x in 0..4 {
                        if m.get(v, y, x) {
                            loss += (sc * a.get(&[v, c, y, x]) - t.get(&[v, c, y, x])).powi(2);
                            cnt += 1;
                        }
                    }
                }
            }
        }
        let tape = Tape::new();
        let got = scale_invariant_albedo_loss(tape.constant(a), tape.constant(t), &m)
            .unwrap()
            .item();
        assert!((got - loss / cnt as f64).abs() < 1e-12);
    }

    #[test]
    fn dark_channel_falls_back_to_unit_scale() {
        let m = ValidityMask::full(1, 2, 2);
        let a = Tensor::from_fn(&[1, 3, 2, 2], |i| if i[1] == 1 { 0.0 } else { 0.5 });
        let t = Tensor::full(&[1, 3, 2, 2], 0.5);
        let s = scale_align(&a, &t, &m).unwrap();
        assert_eq!(s[0][1], 1.0);
        assert!((s[0][0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normal_loss_cases() {
        let tape = Tape::new();
        let m = ValidityMask::full(1, 2, 2);
        let z = Tensor::from_fn(&[1, 3, 2, 2], |i| if i[1] == 2 { 1.0 } else { 0.0 });
        let x = Tensor::from_fn(&[1, 3, 2, 2], |i| if i[1] == 0 { 1.0 } else { 0.0 });
        let zv = tape.constant(z.clone());
        assert_eq!(normal_loss(zv, zv, &m).unwrap().item(), 0.0);
        let neg = tape.constant(z.map(|v| -v));
        assert_eq!(normal_loss(neg, zv, &m).unwrap().item(), 2.0);
        assert_eq!(normal_loss(tape.constant(x), zv, &m).unwrap().item(), 1.0);
    }

    #[test]
    fn normal_loss_rejects_non_unit() {
        let tape = Tape::new();
        let m = ValidityMask::full(1, 1, 1);
        let bad = tape.constant(Tensor::new(&[1, 3, 1, 1], vec![0.0, 0.0, 0.9]).unwrap());
        let good = tape.constant(Tensor::new(&[1, 3, 1, 1], vec![0.0, 0.0, 1.0]).unwrap());
        assert!(normal_loss(bad, good, &m).is_err());
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> IntrinsicSet {
        let normal = Tensor::from_fn(&[n, 3, h, w], |_| rng.gen_range(-1.0..1.0));
        let plane = h * w;
        let mut nd = normal.to_vec();
        for v in 0..n {
            for p in 0..plane {
                let norm: f64 = (0..3).map(|c| nd[(v * 3 + c) * plane + p].powi(2)).sum::<f64>().sqrt();
                for c in 0..3 {
                    nd[(v * 3 + c) * plane + p] /= norm;
                }
            }
        }
        IntrinsicSet {
            albedo: rand_map(rng, &[n, 3, h, w]),
            metallic: rand_map(rng, &[n, 1, h, w]),
            roughness: rand_map(rng, &[n, 1, h, w]),
            normal: Tensor::new(&[n, 3, h, w], nd).unwrap(),
            shading: rand_map(rng, &[n, 3, h, w]),
        }
    }

    fn as_vars<'t>(tape: &'t Tape, s: &IntrinsicSet) -> IntrinsicVars<'t> {
        IntrinsicVars {
            albedo: tape.constant(s.albedo.clone()),
            metallic: tape.constant(s.metallic.clone()),
            roughness: tape.constant(s.roughness.clone()),
            normal: tape.constant(s.normal.clone()),
            shading: tape.constant(s.shading.clone()),
        }
    }

    #[test]
    fn composite_identity_and_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = random_set(&mut rng, 2, 8, 8);
        let pred = random_set(&mut rng, 2, 8, 8);
        let m = ValidityMask::full(2, 8, 8);
        let tape = Tape::new();
        let w = LossWeights::default();
        let same = composite_loss(&as_vars(&tape, &gt), &gt, &w, &m, false).unwrap();
        assert!(same.total.value().item().abs() < 1e-12);
        let zero_w = LossWeights {
            albedo: 0.0,
            metallic: 0.0,
            roughness: 0.0,
            normal: 0.0,
            shading: 0.0,
            anchor: 0.0,
        };
        let l = composite_loss(&as_vars(&tape, &pred), &gt, &zero_w, &m, false).unwrap();
        assert_eq!(l.total.value().item(), 0.0);
    }

    #[test]
    fn composite_equals_hand_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = random_set(&mut rng, 2, 8, 8);
        let pred = random_set(&mut rng, 2, 8, 8);
        let m = rand_mask(&mut rng, 2, 8, 8);
        let tape = Tape::new();
        let pv = as_vars(&tape, &pred);
        let gv = as_vars(&tape, &gt);
        let w = LossWeights {
            albedo: 0.5,
            metallic: 2.0,
            roughness: 1.5,
            normal: 0.25,
            shading: 3.0,
            anchor: 0.1,
        };
        for warm in [false, true] {
            let l = composite_loss(&pv, &gt, &w, &m, warm).unwrap();
            let a_main = if warm {
                mse_loss(pv.albedo, gv.albedo, &m).unwrap().item()
            } else {
                scale_invariant_albedo_loss(pv.albedo, gv.albedo, &m).unwrap().item()
            };
            let dense = |p, t| {
                mse_loss(p, t, &m).unwrap().item() + msg_loss(p, t, &m, 4).unwrap().item()
            };
            let want = w.albedo * (a_main + msg_loss(pv.albedo, gv.albedo, &m, 4).unwrap().item())
                + w.metallic * dense(pv.metallic, gv.metallic)
                + w.roughness * dense(pv.roughness, gv.roughness)
                + w.normal * normal_loss(pv.normal, gv.normal, &m).unwrap().item()
                + w.shading * dense(pv.shading, gv.shading);
            assert!((l.total.value().item() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn finetune_term_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_set(&mut rng, 1, 4, 4);
        let pret = random_set(&mut rng, 1, 4, 4);
        let b = random_set(&mut rng, 1, 4, 4);
        let c = random_set(&mut rng, 1, 4, 4);
        let m = rand_mask(&mut rng, 1, 4, 4);
        let tape = Tape::new();
        let l = finetune_loss(
            &as_vars(&tape, &a),
            &pret,
            &as_vars(&tape, &b),
            &as_vars(&tape, &c),
            &m,
            0.1,
        )
        .unwrap();
        let mut anchor = 0.0;
        let mut cons = 0.0;
        for ((name, x0), (((_, p0), (_, xt)), (_, xw))) in a
            .maps()
            .iter()
            .zip(pret.maps().iter().zip(b.maps()).zip(c.maps()))
        {
            if *name == "normal" {
                continue;
            }
            let n = x0.numel() as f64;
            anchor += x0.data().iter().zip(p0.data()).map(|(u, v)| (u - v).powi(2)).sum::<f64>() / n;
            let ch = xt.shape()[1];
            let (mut s, mut k) = (0.0, 0);
            for cc in 0..ch {
                for y in 0..4 {
                    for x in 0..4 {
                        if m.get(0, y, x) {
                            s += (xt.get(&[0, cc, y, x]) - xw.get(&[0, cc, y, x])).powi(2);
                            k += 1;
                        }
                    }
                }
            }
            cons += s / k as f64;
        }
        assert!((l.total.value().item() - (0.1 * anchor + cons)).abs() < 1e-12);
        assert!((l.anchor - anchor).abs() < 1e-12);
    }

    #[test]
    fn finetune_anchor_weight_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_set(&mut rng, 1, 4, 4);
        let pret = random_set(&mut rng, 1, 4, 4);
        let b = random_set(&mut rng, 1, 4, 4);
        let m = ValidityMask::full(1, 4, 4);
        let tape = Tape::new();
        let bv = as_vars(&tape, &b);
        let l = finetune_loss(&as_vars(&tape, &a), &pret, &bv, &bv, &m, 0.0).unwrap();
        assert_eq!(l.total.value().item(), 0.0);
    }
}
