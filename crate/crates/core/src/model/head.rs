use crate::tensor::{Result, Tensor, Var};

use super::attention::linear;
use super::intrinsics::{IntrinsicVars, CHANNELS};
use super::params::BoundParams;
use super::{ForwardOptions, ModelConfig, TokenGrid};

fn conv<'t>(
    p: &BoundParams<'t>,
    prefix: &str,
    x: Var<'t>,
    stride: usize,
) -> Result<Var<'t>> {
    let w = p.get(&format!("{prefix}.w"));
    let pad = w.shape()[2] / 2;
    x.conv2d(w, Some(p.get(&format!("{prefix}.b"))), stride, pad)
}

/// `z + conv(relu(conv(relu(z))))`.
fn residual_unit<'t>(p: &BoundParams<'t>, prefix: &str, z: Var<'t>) -> Result<Var<'t>> {
    let h = conv(p, &format!("{prefix}.c1"), z.relu(), 1)?;
    let h = conv(p, &format!("{prefix}.c2"), h.relu(), 1)?;
    z.add(h)
}

/// Strided-convolution pyramid over the raw images: full, 1/2, 1/4, 1/8.
pub(crate) fn aux_pyramid<'t>(p: &BoundParams<'t>, images: Var<'t>) -> Result<Vec<Var<'t>>> {
    let mut levels = Vec::with_capacity(4);
    let mut x = conv(p, "aux.0", images, 1)?.relu();
    levels.push(x);
    for s in 1..4 {
        x = conv(p, &format!("aux.{s}"), x, 2)?.relu();
        levels.push(x);
    }
    Ok(levels)
}

/// Tokens of one tap as a `[N, c, H/2^s, W/2^s]` map.
fn reassemble<'t>(
    p: &BoundParams<'t>,
    s: usize,
    tap: &TokenGrid<'t>,
    cfg: &ModelConfig,
) -> Result<Var<'t>> {
    let (n, t, c) = (tap.num_views(), tap.tokens_per_view(), tap.channels());
    let (gh, gw) = tap.grid;
    let proj = linear(p, &format!("reassemble.{s}"), tap.tokens.reshape(&[n * t, c])?)?;
    let cs = cfg.head_channels[s];
    proj.reshape(&[n, gh, gw, cs])?
        .permute(&[0, 3, 1, 2])?
        .bilinear_resize(cfg.image_height >> s, cfg.image_width >> s)
}

pub(crate) fn fuse_and_head<'t>(
    p: &BoundParams<'t>,
    cfg: &ModelConfig,
    taps: &[TokenGrid<'t>; 4],
    images: &Tensor,
    opts: ForwardOptions,
) -> Result<IntrinsicVars<'t>> {
    let tape = taps[0].tokens.tape();
    let aux = if opts.aux {
        Some(aux_pyramid(p, tape.constant(images.clone()))?)
    } else {
        None
    };
    let mut fused: Option<Var<'t>> = None;
    for s in (0..4).rev() {
        let mut z = reassemble(p, s, &taps[s], cfg)?;
        if let Some(aux) = &aux {
            z = z.add(conv(p, &format!("aux_proj.{s}"), aux[s], 1)?)?;
        }
        if let Some(coarse) = fused {
            let up = conv(p, &format!("up.{s}"), coarse, 1)?
                .bilinear_resize(cfg.image_height >> s, cfg.image_width >> s)?;
            z = z.add(up)?;
        }
        fused = Some(residual_unit(p, &format!("fuse.{s}"), z)?);
    }
    let f = fused.expect("four fusion levels");
    let out = |name: &str| conv(p, &format!("out.{name}"), f, 1);
    Ok(IntrinsicVars {
        albedo: out(CHANNELS[0].0)?.sigmoid(),
        metallic: out(CHANNELS[1].0)?.sigmoid(),
        roughness: out(CHANNELS[2].0)?.sigmoid(),
        normal: out(CHANNELS[3].0)?.l2_normalize(1)?,
        shading: out(CHANNELS[4].0)?.sigmoid(),
    })
}
