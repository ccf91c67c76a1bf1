use mvinverse::geometry::{warp_backward, Flow};
use mvinverse::losses::{
    composite_loss, finetune_loss, mse_loss, msg_loss, normal_loss, scale_invariant_albedo_loss, LossWeights,
    ValidityMask,
};
use mvinverse::model::{ForwardOptions, IntrinsicSet, IntrinsicVars, Model, ModelConfig};
use mvinverse::tensor::gradcheck::{central_difference, check_gradients, relative_error, GradCheck};
use mvinverse::tensor::{Result, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const SAMPLES: usize = 12;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// `Σ x ⊙ w` for fixed random `w`, turning any tensor output into a scalar.
fn probe<'t>(x: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_t(&mut rng, &x.shape(), -1.0, 1.0);
    Ok(x.mul(x.tape().constant(w))?.sum_all())
}

fn assert_passes(name: &str, r: GradCheck) {
    assert!(r.passes(TOL), "{name}: {r:?}");
}

macro_rules! check {
    ($name:expr, $inputs:expr, |$t:ident, $v:ident| $body:expr) => {{
        let r = check_gradients(&$inputs, SAMPLES, 7, |$t: &Tape, $v: &[Var<'_>]| {
            let _ = $t;
            $body
        })
        .unwrap();
        assert_passes($name, r);
    }};
}

#[test]
fn elementwise_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_t(&mut rng, &[3, 4], -2.0, 2.0);
    let b = rand_t(&mut rng, &[3, 4], -2.0, 2.0);
    let pos = rand_t(&mut rng, &[3, 4], 0.5, 2.0);
    check!("add", [a.clone(), b.clone()], |t, v| probe(v[0].add(v[1])?, 1));
    check!("sub", [a.clone(), b.clone()], |t, v| probe(v[0].sub(v[1])?, 2));
    check!("mul", [a.clone(), b.clone()], |t, v| probe(v[0].mul(v[1])?, 3));
    check!("div", [a.clone(), pos.clone()], |t, v| probe(v[0].div(v[1])?, 4));
    check!("scale", [a.clone()], |t, v| probe(v[0].scale(-1.7), 5));
    check!("add_scalar", [a.clone()], |t, v| probe(v[0].add_scalar(0.3), 6));
    check!("neg", [a.clone()], |t, v| probe(v[0].neg(), 7));
    check!("square", [a.clone()], |t, v| probe(v[0].square(), 8));
    check!("sqrt", [pos.clone()], |t, v| probe(v[0].sqrt(), 9));
    check!("exp", [a.clone()], |t, v| probe(v[0].exp(), 10));
    check!("sigmoid", [a.clone()], |t, v| probe(v[0].sigmoid(), 11));
    check!("relu", [a.clone()], |t, v| probe(v[0].relu(), 12));
    check!("gelu", [a.clone()], |t, v| probe(v[0].gelu(), 13));
    let bias = rand_t(&mut rng, &[4], -1.0, 1.0);
    check!("add_bcast", [a.clone(), bias], |t, v| probe(v[0].add_bcast(v[1])?, 14));
}

#[test]
fn reductions_and_layout() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_t(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let y = rand_t(&mut rng, &[2, 2, 4], -1.0, 1.0);
    check!("sum_all", [x.clone()], |t, v| Ok(v[0].square().sum_all()));
    check!("mean_all", [x.clone()], |t, v| Ok(v[0].square().mean_all()));
    check!("sum_axis", [x.clone()], |t, v| probe(v[0].sum_axis(1, false)?, 1));
    check!("sum_axis keepdim", [x.clone()], |t, v| probe(v[0].sum_axis(2, true)?, 2));
    check!("reshape", [x.clone()], |t, v| probe(v[0].reshape(&[6, 4])?, 3));
    check!("permute", [x.clone()], |t, v| probe(v[0].permute(&[2, 0, 1])?, 4));
    check!("narrow", [x.clone()], |t, v| probe(v[0].narrow(1, 1, 2)?, 5));
    check!("concat", [x, y], |t, v| probe(Var::concat(&[v[0], v[1]], 1)?, 6));
}

#[test]
fn normalization_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_t(&mut rng, &[3, 5], -2.0, 2.0);
    let g = rand_t(&mut rng, &[5], 0.5, 1.5);
    let b = rand_t(&mut rng, &[5], -0.5, 0.5);
    check!("softmax", [x.clone()], |t, v| probe(v[0].softmax(1)?, 1));
    check!("softmax axis 0", [x.clone()], |t, v| probe(v[0].softmax(0)?, 2));
    check!("layernorm", [x.clone(), g, b], |t, v| probe(v[0].layernorm(v[1], v[2])?, 3));
    check!("l2_normalize", [x], |t, v| probe(v[0].l2_normalize(1)?, 4));
}

#[test]
fn linear_algebra_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_t(&mut rng, &[3, 4], -1.0, 1.0);
    let b = rand_t(&mut rng, &[4, 5], -1.0, 1.0);
    check!("matmul", [a, b], |t, v| probe(v[0].matmul(v[1])?, 1));
    let x = rand_t(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let y = rand_t(&mut rng, &[2, 4, 5], -1.0, 1.0);
    let yt = rand_t(&mut rng, &[2, 5, 4], -1.0, 1.0);
    check!("bmm", [x.clone(), y], |t, v| probe(v[0].bmm(v[1], false)?, 2));
    check!("bmm transposed", [x, yt], |t, v| probe(v[0].bmm(v[1], true)?, 3));
}

#[test]
fn convolution_and_resampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_t(&mut rng, &[2, 3, 6, 7], -1.0, 1.0);
    let w = rand_t(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
    let bias = rand_t(&mut rng, &[4], -0.5, 0.5);
    check!("conv2d", [x.clone(), w.clone(), bias], |t, v| probe(v[0].conv2d(v[1], Some(v[2]), 1, 1)?, 1));
    check!("conv2d stride 2", [x.clone(), w], |t, v| probe(v[0].conv2d(v[1], None, 2, 0)?, 2));
    check!("bilinear upsample", [x.clone()], |t, v| probe(v[0].bilinear_resize(11, 9)?, 3));
    check!("bilinear downsample", [x], |t, v| probe(v[0].bilinear_resize(3, 4)?, 4));
    let map = rand_t(&mut rng, &[2, 5, 6], -1.0, 1.0);
    let coords = Tensor::from_fn(&[2, 4, 4], |i| {
        let hi = if i[0] == 0 { 5.0 } else { 4.0 };
        0.13 + (hi - 0.3) * ((i[1] * 4 + i[2]) as f64 * 0.377).fract()
    });
    let valid: Vec<bool> = (0..16).map(|i| i % 5 != 3).collect();
    check!("sample_bilinear", [map], |t, v| probe(v[0].sample_bilinear(&coords, &valid)?, 5));
}

fn mask(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> ValidityMask {
    ValidityMask::new(n, h, w, (0..n * h * w).map(|_| rng.gen_bool(0.8)).collect())
}

fn unit_normals(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Tensor {
    let raw = rand_t(rng, &[n, 3, h, w], -1.0, 1.0);
    let tape = Tape::new();
    tape.constant(raw).l2_normalize(1).unwrap().value()
}

#[test]
fn every_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (n, h, w) = (2, 8, 8);
    let m = mask(&mut rng, n, h, w);
    let p = rand_t(&mut rng, &[n, 3, h, w], 0.1, 0.9);
    let g = rand_t(&mut rng, &[n, 3, h, w], 0.1, 0.9);
    check!("mse", [p.clone(), g.clone()], |t, v| Ok(mse_loss(v[0], v[1], &m)?.value));
    check!("msg", [p.clone(), g.clone()], |t, v| Ok(msg_loss(v[0], v[1], &m, 4)?.value));
    check!("scale invariant", [p.clone()], |t, v| {
        Ok(scale_invariant_albedo_loss(v[0], t.constant(g.clone()), &m)?.value)
    });
    let raw = rand_t(&mut rng, &[n, 3, h, w], -1.0, 1.0);
    let gn = unit_normals(&mut rng, n, h, w);
    check!("normal", [raw], |t, v| {
        Ok(normal_loss(v[0].l2_normalize(1)?, t.constant(gn.clone()), &m)?.value)
    });
}

fn random_set(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> IntrinsicSet {
    IntrinsicSet {
        albedo: rand_t(rng, &[n, 3, h, w], 0.05, 0.95),
        metallic: rand_t(rng, &[n, 1, h, w], 0.05, 0.95),
        roughness: rand_t(rng, &[n, 1, h, w], 0.05, 0.95),
        normal: unit_normals(rng, n, h, w),
        shading: rand_t(rng, &[n, 3, h, w], 0.05, 0.95),
    }
}

fn set_vars<'t>(v: &[Var<'t>]) -> Result<IntrinsicVars<'t>> {
    Ok(IntrinsicVars {
        albedo: v[0],
        metallic: v[1],
        roughness: v[2],
        normal: v[3].l2_normalize(1)?,
        shading: v[4],
    })
}

fn set_inputs(s: &IntrinsicSet, raw_normal: &Tensor) -> Vec<Tensor> {
    vec![
        s.albedo.clone(),
        s.metallic.clone(),
        s.roughness.clone(),
        raw_normal.clone(),
        s.shading.clone(),
    ]
}

#[test]
fn composite_objective_in_both_phases() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, h, w) = (2, 8, 8);
    let m = mask(&mut rng, n, h, w);
    let pred = random_set(&mut rng, n, h, w);
    let gt = random_set(&mut rng, n, h, w);
    let raw = rand_t(&mut rng, &[n, 3, h, w], -1.0, 1.0);
    let weights = LossWeights {
        albedo: 1.3,
        metallic: 0.7,
        roughness: 0.4,
        normal: 1.1,
        shading: 0.9,
        ..LossWeights::default()
    };
    for warmup in [true, false] {
        check!("composite", set_inputs(&pred, &raw), |t, v| {
            Ok(composite_loss(&set_vars(v)?, &gt, &weights, &m, warmup)?.total)
        });
    }
}

fn random_flow(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Flow {
    let uv = Tensor::from_fn(&[2, h, w], |_| rng.gen_range(-1.6..1.6));
    let valid = (0..h * w).map(|_| rng.gen_bool(0.9)).collect();
    Flow { uv, valid }
}

fn geo<T>(r: mvinverse::geometry::Result<T>) -> Result<T> {
    r.map_err(|e| TensorError::Contract(e.to_string()))
}

#[test]
fn finetune_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (h, w) = (6, 7);
    let m0 = random_set(&mut rng, 1, h, w);
    let mt = random_set(&mut rng, 1, h, w);
    let next = random_set(&mut rng, 1, h, w);
    let pret = random_set(&mut rng, 1, h, w);
    let raw = rand_t(&mut rng, &[1, 3, h, w], -1.0, 1.0);
    let flow = random_flow(&mut rng, h, w);
    let mut inputs = set_inputs(&m0, &raw);
    inputs.extend(set_inputs(&mt, &raw));
    inputs.extend(set_inputs(&next, &raw));
    check!("finetune", inputs, |t, v| {
        let a = set_vars(&v[0..5])?;
        let b = set_vars(&v[5..10])?;
        let c = set_vars(&v[10..15])?;
        let (albedo, valid) = geo(warp_backward(c.albedo, &flow))?;
        let warped = IntrinsicVars {
            albedo,
            metallic: geo(warp_backward(c.metallic, &flow))?.0,
            roughness: geo(warp_backward(c.roughness, &flow))?.0,
            normal: b.normal,
            shading: geo(warp_backward(c.shading, &flow))?.0,
        };
        let vm = ValidityMask::new(1, h, w, valid);
        Ok(finetune_loss(&a, &pret, &b, &warped, &vm, 0.37)?.total)
    });
}

#[test]
fn warp_operator() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (h, w) = (7, 9);
    let flow = random_flow(&mut rng, h, w);
    let map = rand_t(&mut rng, &[3, h, w], -1.0, 1.0);
    check!("warp", [map.clone()], |t, v| probe(geo(warp_backward(v[0], &flow))?.0, 1));
    let batched = map.reshape(&[1, 3, h, w]).unwrap();
    check!("warp batched", [batched], |t, v| probe(geo(warp_backward(v[0], &flow))?.0, 2));
}

fn toy_config() -> ModelConfig {
    ModelConfig {
        patch_size: 4,
        embed_dim: 8,
        num_blocks: 2,
        num_heads: 2,
        mlp_ratio: 2,
        head_channels: [4, 4, 4, 4],
        image_height: 8,
        image_width: 8,
    }
}

fn network_loss<'t>(out: &IntrinsicVars<'t>) -> Result<Var<'t>> {
    let mut acc: Option<Var<'t>> = None;
    for (i, (_, m)) in out.maps().into_iter().enumerate() {
        let term = probe(m, 100 + i as u64)?;
        acc = Some(match acc {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    Ok(acc.expect("five maps"))
}

#[test]
fn full_network_parameters() {
    let model = Model::new(toy_config(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let images = rand_t(&mut rng, &[2, 3, 8, 8], 0.0, 1.0);
    let tape = Tape::new();
    let bound = model.bind(&tape, true);
    let out = model.forward(&bound, &images, ForwardOptions::default()).unwrap();
    tape.backward(network_loss(&out).unwrap()).unwrap();
    let grads = bound.grads();
    let value = |name: &str| {
        let model = &model;
        let images = &images;
        let name = name.to_string();
        move |xs: &[Tensor]| -> Result<f64> {
            let mut m = model.clone();
            m.params_mut().set(&name, xs[0].clone());
            let tape = Tape::new();
            let p = m.bind(&tape, false);
            let out = m.forward(&p, images, ForwardOptions::default()).map_err(|e| TensorError::Contract(e.to_string()))?;
            network_loss(&out)?.item()
        }
    };
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (name, t) in model.params().iter() {
        let f = value(name);
        for _ in 0..2 {
            let i = rng.gen_range(0..t.numel());
            let numeric = central_difference(&f, &[t.clone()], 0, i, 1e-5).unwrap();
            let err = relative_error(grads[name].data()[i], numeric);
            assert!(err < TOL, "{name}[{i}]: analytic {} numeric {numeric}", grads[name].data()[i]);
            worst = worst.max(err);
            checked += 1;
        }
    }
    assert!(checked >= 2 * model.params().len());
    assert!(worst < TOL);
}
