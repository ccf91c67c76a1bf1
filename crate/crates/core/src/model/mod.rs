//! The multi-view intrinsic network: patch embedding, alternating
//! frame-wise / global attention, and a dense fusion head with an auxiliary
//! convolutional pyramid.

mod attention;
mod config;
mod head;
mod intrinsics;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{patchify, Tape, Tensor, TensorError, Var};

pub use attention::Scope;
pub use config::ModelConfig;
pub use intrinsics::{IntrinsicSet, IntrinsicVars, CHANNELS};
pub use params::{BoundParams, ParamStore};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("empty view sequence")]
    EmptySequence,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Patch embedding and attention-block parameters.
pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("embed.") || name.starts_with("blocks.")
}

/// Tokens `[N, T, C]` of every view plus the patch-grid extents.
#[derive(Clone, Copy, Debug)]
pub struct TokenGrid<'t> {
    pub tokens: Var<'t>,
    pub grid: (usize, usize),
}

impl<'t> TokenGrid<'t> {
    pub fn num_views(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn tokens_per_view(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.tokens.shape()[2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Add the auxiliary convolutional pyramid to the fusion path.
    pub aux: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self { aux: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    params: ParamStore,
}

impl Model {
    /// Fresh weights drawn deterministically from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let c = cfg.embed_dim;
        let feat = 3 * cfg.patch_size * cfg.patch_size;
        let lin_std = |fan_in: usize| (1.0 / fan_in as f64).sqrt();
        let conv_std = |fan_in: usize| (2.0 / fan_in as f64).sqrt();

        ps.normal(&mut rng, "embed.w", &[feat, c], lin_std(feat));
        ps.constant("embed.b", &[c], 0.0);
        ps.normal(&mut rng, "embed.pos", &[cfg.tokens_per_view(), c], 0.02);

        let hidden = c * cfg.mlp_ratio;
        for i in 0..cfg.num_blocks {
            let b = format!("blocks.{i}");
            for ln in ["ln1", "ln2"] {
                ps.constant(format!("{b}.{ln}.g"), &[c], 1.0);
                ps.constant(format!("{b}.{ln}.b"), &[c], 0.0);
            }
            for proj in ["q", "k", "v", "o"] {
                ps.normal(&mut rng, format!("{b}.attn.{proj}.w"), &[c, c], lin_std(c));
                ps.constant(format!("{b}.attn.{proj}.b"), &[c], 0.0);
            }
            ps.normal(&mut rng, format!("{b}.mlp.fc1.w"), &[c, hidden], lin_std(c));
            ps.constant(format!("{b}.mlp.fc1.b"), &[hidden], 0.0);
            ps.normal(&mut rng, format!("{b}.mlp.fc2.w"), &[hidden, c], lin_std(hidden));
            ps.constant(format!("{b}.mlp.fc2.b"), &[c], 0.0);
        }

        let hc = cfg.head_channels;
        for s in 0..4 {
            ps.normal(&mut rng, format!("reassemble.{s}.w"), &[c, hc[s]], lin_std(c));
            ps.constant(format!("reassemble.{s}.b"), &[hc[s]], 0.0);
            let cin = if s == 0 { 3 } else { hc[s - 1] };
            ps.normal(&mut rng, format!("aux.{s}.w"), &[hc[s], cin, 3, 3], conv_std(cin * 9));
            ps.constant(format!("aux.{s}.b"), &[hc[s]], 0.0);
            ps.normal(&mut rng, format!("aux_proj.{s}.w"), &[hc[s], hc[s], 1, 1], lin_std(hc[s]));
            ps.constant(format!("aux_proj.{s}.b"), &[hc[s]], 0.0);
            if s < 3 {
                ps.normal(&mut rng, format!("up.{s}.w"), &[hc[s], hc[s + 1], 1, 1], lin_std(hc[s + 1]));
                ps.constant(format!("up.{s}.b"), &[hc[s]], 0.0);
            }
            for unit in ["c1", "c2"] {
                let name = format!("fuse.{s}.{unit}");
                ps.normal(&mut rng, format!("{name}.w"), &[hc[s], hc[s], 3, 3], conv_std(hc[s] * 9) * 0.5);
                ps.constant(format!("{name}.b"), &[hc[s]], 0.0);
            }
        }
        for (name, ch) in CHANNELS {
            ps.normal(&mut rng, format!("out.{name}.w"), &[ch, hc[0], 3, 3], lin_std(hc[0] * 9));
            ps.constant(format!("out.{name}.b"), &[ch], 0.0);
        }
        Ok(Self { cfg, params: ps })
    }

    /// Rebuild from stored weights; names and shapes must match a fresh
    /// model of the same configuration.
    pub fn from_parts(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(cfg.clone(), 0)?;
        if reference.params.len() != params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, got {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(ModelError::Config(format!(
                        "parameter {name}: expected shape {:?}, got {:?}",
                        t.shape(),
                        p.shape()
                    )))
                }
                None => return Err(ModelError::Config(format!("missing parameter {name}"))),
            }
        }
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundParams<'t> {
        BoundParams::bind(&self.params, tape, trainable)
    }

    fn check_images(&self, images: &Tensor) -> Result<usize> {
        match images.shape() {
            &[0, ..] => Err(ModelError::EmptySequence),
            &[n, 3, h, w] if h == self.cfg.image_height && w == self.cfg.image_width => Ok(n),
            s => Err(ModelError::Config(format!(
                "expected images [N, 3, {}, {}], got {s:?}",
                self.cfg.image_height, self.cfg.image_width
            ))),
        }
    }

    /// Linear projection of each `p×p×3` patch plus the shared spatial
    /// positional table.
    pub fn patch_embed<'t>(&self, p: &BoundParams<'t>, images: &Tensor) -> Result<TokenGrid<'t>> {
        let n = self.check_images(images)?;
        let tape = p.get("embed.w").tape();
        let rows = tape.constant(patchify(images, self.cfg.patch_size)?);
        let t = self.cfg.tokens_per_view();
        let tokens = attention::linear(p, "embed", rows)?
            .reshape(&[n, t, self.cfg.embed_dim])?
            .add_bcast(p.get("embed.pos"))?;
        Ok(TokenGrid {
            tokens,
            grid: self.cfg.grid(),
        })
    }

    /// Block `index` restricted to per-view attention.
    pub fn frame_attention<'t>(
        &self,
        p: &BoundParams<'t>,
        index: usize,
        x: &TokenGrid<'t>,
    ) -> Result<TokenGrid<'t>> {
        self.run_block(p, index, x, Scope::Frame)
    }

    /// Block `index` with joint attention over all views.
    pub fn global_attention<'t>(
        &self,
        p: &BoundParams<'t>,
        index: usize,
        x: &TokenGrid<'t>,
    ) -> Result<TokenGrid<'t>> {
        self.run_block(p, index, x, Scope::Global)
    }

    fn run_block<'t>(
        &self,
        p: &BoundParams<'t>,
        index: usize,
        x: &TokenGrid<'t>,
        scope: Scope,
    ) -> Result<TokenGrid<'t>> {
        if index >= self.cfg.num_blocks {
            return Err(ModelError::Config(format!("no block {index}")));
        }
        Ok(attention::block(
            p,
            &format!("blocks.{index}"),
            x,
            self.cfg.num_heads,
            scope,
        )?)
    }

    /// Scope used by block `index` in the backbone.
    pub fn block_scope(index: usize) -> Scope {
        if index % 2 == 0 {
            Scope::Frame
        } else {
            Scope::Global
        }
    }

    /// Backbone outputs at the four tap depths.
    pub fn backbone<'t>(&self, p: &BoundParams<'t>, images: &Tensor) -> Result<[TokenGrid<'t>; 4]> {
        let mut x = self.patch_embed(p, images)?;
        let taps = self.cfg.tap_blocks();
        let mut out = [None; 4];
        for i in 0..self.cfg.num_blocks {
            x = self.run_block(p, i, &x, Self::block_scope(i))?;
            for (k, &t) in taps.iter().enumerate() {
                if t == i {
                    out[k] = Some(x);
                }
            }
        }
        Ok(out.map(|t| t.expect("every tap depth is a block index")))
    }

    pub fn fuse_and_head<'t>(
        &self,
        p: &BoundParams<'t>,
        taps: &[TokenGrid<'t>; 4],
        images: &Tensor,
        opts: ForwardOptions,
    ) -> Result<IntrinsicVars<'t>> {
        self.check_images(images)?;
        Ok(head::fuse_and_head(p, &self.cfg, taps, images, opts)?)
    }

    pub fn forward<'t>(
        &self,
        p: &BoundParams<'t>,
        images: &Tensor,
        opts: ForwardOptions,
    ) -> Result<IntrinsicVars<'t>> {
        let taps = self.backbone(p, images)?;
        self.fuse_and_head(p, &taps, images, opts)
    }

    /// Inference without gradient tracking.
    pub fn predict(&self, images: &Tensor) -> Result<IntrinsicSet> {
        self.predict_with(images, ForwardOptions::default())
    }

    pub fn predict_with(&self, images: &Tensor, opts: ForwardOptions) -> Result<IntrinsicSet> {
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        Ok(self.forward(&p, images, opts)?.values())
    }
}

#[cfg(test)]
pub(crate) fn tiny_config() -> ModelConfig {
    ModelConfig {
        patch_size: 4,
        embed_dim: 16,
        num_blocks: 2,
        num_heads: 2,
        mlp_ratio: 2,
        head_channels: [4, 4, 8, 8],
        image_height: 16,
        image_width: 16,
    }
}
