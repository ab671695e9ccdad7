//! Frozen vision-transformer encoder.
//!
//! Weights are drawn once from `EncoderConfig::seed` and never trained;
//! the model binds them as graph constants whenever the backbone is frozen.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{self, ParamStore, Session};
use crate::tensor::Tensor;

pub const PREFIX: &str = "encoder.";
const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { input_size: 64, patch_size: 8, embed_dim: 64, depth: 2, heads: 4, mlp_ratio: 4, seed: 1234 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.input_size == 0 || self.input_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "input size {} not divisible by patch size {}",
                self.input_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide embed dim {}", self.heads, self.embed_dim)));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    /// Spatial side of the token grid, `S / P`.
    pub fn grid(&self) -> usize {
        self.input_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// Draw the frozen weights into `store` under `encoder.`.
pub fn init(cfg: &EncoderConfig, store: &mut ParamStore) -> Result<()> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c = cfg.embed_dim;
    nn::init_linear(store, &mut rng, "encoder.patch_embed", cfg.patch_dim(), c, true);
    store.insert("encoder.cls_token", Tensor::randn(&[1, 1, c], 0.02, &mut rng));
    store.insert("encoder.pos_embed", Tensor::randn(&[1, cfg.num_patches() + 1, c], 0.02, &mut rng));
    for l in 0..cfg.depth {
        let p = format!("encoder.blocks.{l}");
        for ln in ["ln1", "ln2"] {
            store.insert(format!("{p}.{ln}.gain"), Tensor::ones(&[c]));
            store.insert(format!("{p}.{ln}.bias"), Tensor::zeros(&[c]));
        }
        nn::init_linear(store, &mut rng, &format!("{p}.attn.qkv"), c, 3 * c, true);
        nn::init_linear(store, &mut rng, &format!("{p}.attn.proj"), c, c, true);
        nn::init_linear(store, &mut rng, &format!("{p}.mlp.fc1"), c, cfg.mlp_ratio * c, true);
        nn::init_linear(store, &mut rng, &format!("{p}.mlp.fc2"), cfg.mlp_ratio * c, c, true);
    }
    Ok(())
}

/// `[B,3,S,S] -> [B,N,P²·3]`; patches row-major, each patch `(py, px, channel)`.
pub fn patchify(g: &mut Graph, x: Var, patch: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || patch == 0 || s[2] % patch != 0 || s[3] % patch != 0 {
        return Err(Error::Shape(format!("cannot patchify {s:?} with patch size {patch}")));
    }
    let (b, c, hh, ww) = (s[0], s[1], s[2] / patch, s[3] / patch);
    let r = g.reshape(x, &[b, c, hh, patch, ww, patch])?;
    let r = g.permute(r, &[0, 2, 4, 3, 5, 1])?;
    g.reshape(r, &[b, hh * ww, patch * patch * c])
}

/// Inverse of [`patchify`] for a `grid × grid` layout with `channels` channels.
pub fn unpatchify(g: &mut Graph, x: Var, patch: usize, grid: usize, channels: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[1] != grid * grid || s[2] != patch * patch * channels {
        return Err(Error::Shape(format!("cannot unpatchify {s:?} to grid {grid} patch {patch}")));
    }
    let r = g.reshape(x, &[s[0], grid, grid, patch, patch, channels])?;
    let r = g.permute(r, &[0, 5, 1, 3, 2, 4])?;
    g.reshape(r, &[s[0], channels, grid * patch, grid * patch])
}

/// Resize a single-channel batch to `S×S` and replicate it into three channels.
pub fn broadcast_grayscale(g: &mut Graph, x: Var, size: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::Shape(format!("expected [B,1,H,W], got {s:?}")));
    }
    let r = g.interpolate_bilinear(x, size, size)?;
    g.concat(&[r, r, r], 1)
}

fn block(s: &mut Session, z: Var, l: usize, heads: usize) -> Result<Var> {
    let p = format!("encoder.blocks.{l}");
    let c = s.g.shape(z)[2];

    let g1 = s.p(&format!("{p}.ln1.gain"))?;
    let b1 = s.p(&format!("{p}.ln1.bias"))?;
    let h = s.g.layer_norm(z, Some(g1), Some(b1), LN_EPS)?;
    let qkv = s.linear(h, &format!("{p}.attn.qkv"))?;
    let q = s.g.narrow(qkv, 2, 0, c)?;
    let k = s.g.narrow(qkv, 2, c, c)?;
    let v = s.g.narrow(qkv, 2, 2 * c, c)?;
    let a = nn::attention(&mut s.g, q, k, v, heads)?;
    let a = s.linear(a, &format!("{p}.attn.proj"))?;
    let z = s.g.add(z, a)?;

    let g2 = s.p(&format!("{p}.ln2.gain"))?;
    let b2 = s.p(&format!("{p}.ln2.bias"))?;
    let h = s.g.layer_norm(z, Some(g2), Some(b2), LN_EPS)?;
    let h = s.linear(h, &format!("{p}.mlp.fc1"))?;
    let h = s.g.gelu(h);
    let h = s.linear(h, &format!("{p}.mlp.fc2"))?;
    s.g.add(z, h)
}

/// `[B,1,H,W] -> F: [B,C_e,S/P,S/P]`.
pub fn encode(s: &mut Session, cfg: &EncoderConfig, x: Var) -> Result<Var> {
    cfg.validate()?;
    let b = s.g.shape(x)[0];
    let x3 = broadcast_grayscale(&mut s.g, x, cfg.input_size)?;
    let patches = patchify(&mut s.g, x3, cfg.patch_size)?;
    let tokens = s.linear(patches, "encoder.patch_embed")?;

    let cls = s.p("encoder.cls_token")?;
    let zeros = s.g.constant(Tensor::zeros(&[b, 1, cfg.embed_dim]));
    let cls = s.g.add(zeros, cls)?;
    let z = s.g.concat(&[cls, tokens], 1)?;
    let pos = s.p("encoder.pos_embed")?;
    if s.g.shape(pos)[1] != s.g.shape(z)[1] {
        return Err(Error::Shape(format!(
            "positional embedding covers {} tokens, sequence has {}",
            s.g.shape(pos)[1],
            s.g.shape(z)[1]
        )));
    }
    let mut z = s.g.add(z, pos)?;
    for l in 0..cfg.depth {
        z = block(s, z, l, cfg.heads)?;
    }
    let n = cfg.num_patches();
    let spatial = s.g.narrow(z, 1, 1, n)?;
    nn::from_tokens(&mut s.g, spatial, cfg.grid(), cfg.grid())
}

/// True iff every encoder parameter is bit-identical between two snapshots.
pub fn assert_frozen(before: &ParamStore, after: &ParamStore) -> Result<bool> {
    let a = before.subset(PREFIX);
    let b = after.subset(PREFIX);
    if a.len() != b.len() {
        return Err(Error::Shape(format!("snapshots hold {} and {} encoder tensors", a.len(), b.len())));
    }
    let mut same = true;
    for (name, ta) in a.iter() {
        let tb = b.get(name).ok_or_else(|| Error::Shape(format!("`{name}` missing from second snapshot")))?;
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!("`{name}`: {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        same &= ta.bit_eq(tb);
    }
    Ok(same)
}

pub fn checksum(store: &ParamStore) -> u32 {
    store.subset(PREFIX).checksum()
}
