use crate::tensor::{Result, Var};

use super::params::BoundParams;
use super::TokenGrid;

/// Token grouping for one attention block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    /// Tokens attend within their own view.
    Frame,
    /// All tokens of all views attend jointly.
    Global,
}

pub(crate) fn linear<'t>(p: &BoundParams<'t>, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
    x.matmul(p.get(&format!("{prefix}.w")))?
        .add_bcast(p.get(&format!("{prefix}.b")))
}

/// `[B·S, C]` → `[B·heads, S, dh]`.
fn split_heads(x: Var<'_>, b: usize, s: usize, heads: usize) -> Result<Var<'_>> {
    let c = x.shape()[1];
    let dh = c / heads;
    x.reshape(&[b, s, heads, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b * heads, s, dh])
}

fn merge_heads(x: Var<'_>, b: usize, s: usize, heads: usize) -> Result<Var<'_>> {
    let dh = x.shape()[2];
    x.reshape(&[b, heads, s, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b * s, heads * dh])
}

/// Pre-norm transformer block `prefix` applied with the given scope.
pub(crate) fn block<'t>(
    p: &BoundParams<'t>,
    prefix: &str,
    x: &TokenGrid<'t>,
    heads: usize,
    scope: Scope,
) -> Result<TokenGrid<'t>> {
    let (n, t, c) = (x.num_views(), x.tokens_per_view(), x.channels());
    let (b, s) = match scope {
        Scope::Frame => (n, t),
        Scope::Global => (1, n * t),
    };
    let flat = x.tokens.reshape(&[n * t, c])?;

    let h = flat.layernorm(
        p.get(&format!("{prefix}.ln1.g")),
        p.get(&format!("{prefix}.ln1.b")),
    )?;
    let q = split_heads(linear(p, &format!("{prefix}.attn.q"), h)?, b, s, heads)?;
    let k = split_heads(linear(p, &format!("{prefix}.attn.k"), h)?, b, s, heads)?;
    let v = split_heads(linear(p, &format!("{prefix}.attn.v"), h)?, b, s, heads)?;
    let dh = c / heads;
    let att = q
        .bmm(k, true)?
        .scale(1.0 / (dh as f64).sqrt())
        .softmax(2)?;
    let mixed = merge_heads(att.bmm(v, false)?, b, s, heads)?;
    let flat = flat.add(linear(p, &format!("{prefix}.attn.o"), mixed)?)?;

    let h = flat.layernorm(
        p.get(&format!("{prefix}.ln2.g")),
        p.get(&format!("{prefix}.ln2.b")),
    )?;
    let h = linear(p, &format!("{prefix}.mlp.fc1"), h)?.gelu();
    let flat = flat.add(linear(p, &format!("{prefix}.mlp.fc2"), h)?)?;

    Ok(TokenGrid {
        tokens: flat.reshape(&[n, t, c])?,
        grid: x.grid,
    })
}
