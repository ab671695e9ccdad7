//! Cardiac-specific attention bottleneck.
//!
//! For each structure `k`, a depthwise prior `P_k` conditions a single-head
//! attention branch over the spatial tokens of `F + P_k`. A multi-head
//! branch attends over `F` itself. A zero-initialized 1×1 convolution fuses
//! `[G, S_1, …, S_K]` into a residual update, so the module starts as the
//! identity.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv2dOpts, Var};
use crate::error::{Error, Result};
use crate::nn::{self, ParamStore, Session};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsamConfig {
    pub channels: usize,
    pub structures: usize,
    pub key_dim: usize,
    pub heads: usize,
}

impl Default for CsamConfig {
    fn default() -> Self {
        Self { channels: 64, structures: 3, key_dim: 64, heads: 4 }
    }
}

impl CsamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.structures == 0 {
            return Err(Error::Config("CSAM needs at least one structure".into()));
        }
        if self.key_dim == 0 {
            return Err(Error::Config("key width must be positive".into()));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide {} channels", self.heads, self.channels)));
        }
        Ok(())
    }

    pub fn fusion_inputs(&self) -> usize {
        (self.structures + 1) * self.channels
    }
}

pub fn init<R: Rng + ?Sized>(cfg: &CsamConfig, store: &mut ParamStore, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let c = cfg.channels;
    for k in 1..=cfg.structures {
        nn::init_conv(store, rng, &format!("csam.prior.{k}"), c, 1, 3, true);
        nn::init_linear(store, rng, &format!("csam.ssa.{k}.query"), c, cfg.key_dim, false);
        nn::init_linear(store, rng, &format!("csam.ssa.{k}.key"), c, cfg.key_dim, false);
        nn::init_linear(store, rng, &format!("csam.ssa.{k}.value"), c, c, false);
    }
    for n in ["query", "key", "value", "out"] {
        nn::init_linear(store, rng, &format!("csam.global.{n}"), c, c, true);
    }
    nn::init_zeros(store, "csam.fuse.weight", &[c, cfg.fusion_inputs(), 1, 1]);
    nn::init_zeros(store, "csam.fuse.bias", &[c]);
    Ok(())
}

fn check_k(cfg: &CsamConfig, k: usize) -> Result<()> {
    if k == 0 || k > cfg.structures {
        return Err(Error::Config(format!("structure index {k} outside 1..={}", cfg.structures)));
    }
    Ok(())
}

/// `P_k`: depthwise 3×3 convolution of `F` plus bias.
pub fn structure_prior(s: &mut Session, cfg: &CsamConfig, f: Var, k: usize) -> Result<Var> {
    check_k(cfg, k)?;
    s.conv(f, &format!("csam.prior.{k}"), Conv2dOpts::depthwise(cfg.channels, 1))
}

/// `S_k = softmax(Q_k K_kᵀ / √d_k) V_k` over the tokens of `F + P_k`.
pub fn structure_attention(s: &mut Session, cfg: &CsamConfig, f: Var, prior: Var, k: usize) -> Result<Var> {
    check_k(cfg, k)?;
    let (h, w) = (s.g.shape(f)[2], s.g.shape(f)[3]);
    let x = s.g.add(f, prior)?;
    let t = nn::to_tokens(s.g, x)?;
    let q = s.linear(t, &format!("csam.ssa.{k}.query"))?;
    let kk = s.linear(t, &format!("csam.ssa.{k}.key"))?;
    let v = s.linear(t, &format!("csam.ssa.{k}.value"))?;
    let a = nn::attention(s.g, q, kk, v, 1)?;
    nn::from_tokens(s.g, a, h, w)
}

/// Multi-head self-attention over the spatial tokens of `F`.
pub fn global_context(s: &mut Session, cfg: &CsamConfig, f: Var) -> Result<Var> {
    if cfg.heads == 0 || s.g.shape(f)[1] % cfg.heads != 0 {
        return Err(Error::Shape(format!("{} heads do not divide {} channels", cfg.heads, s.g.shape(f)[1])));
    }
    let (h, w) = (s.g.shape(f)[2], s.g.shape(f)[3]);
    let t = nn::to_tokens(s.g, f)?;
    let q = s.linear(t, "csam.global.query")?;
    let k = s.linear(t, "csam.global.key")?;
    let v = s.linear(t, "csam.global.value")?;
    let a = nn::attention(s.g, q, k, v, cfg.heads)?;
    let o = s.linear(a, "csam.global.out")?;
    nn::from_tokens(s.g, o, h, w)
}

/// `F' = F + Conv1×1([G ∥ S_1 ∥ … ∥ S_K])`.
pub fn fuse_residual(s: &mut Session, f: Var, g: Var, branches: &[Var]) -> Result<Var> {
    let shape = s.g.shape(f).to_vec();
    let mut parts = vec![g];
    parts.extend_from_slice(branches);
    for &p in &parts {
        if s.g.shape(p) != shape.as_slice() {
            return Err(Error::Shape(format!("fusion input {:?} differs from F {:?}", s.g.shape(p), shape)));
        }
    }
    let cat = s.g.concat(&parts, 1)?;
    let upd = s.conv(cat, "csam.fuse", Conv2dOpts::default())?;
    s.g.add(f, upd)
}

pub fn forward(s: &mut Session, cfg: &CsamConfig, f: Var) -> Result<Var> {
    cfg.validate()?;
    let g = global_context(s, cfg, f)?;
    let mut branches = Vec::with_capacity(cfg.structures);
    for k in 1..=cfg.structures {
        let p = structure_prior(s, cfg, f, k)?;
        branches.push(structure_attention(s, cfg, f, p, k)?);
    }
    fuse_residual(s, f, g, &branches)
}

/// Replace a stored tensor, keeping its shape. Test fixtures use this.
pub fn set_param(store: &mut ParamStore, name: &str, f: impl Fn(&[usize]) -> Tensor) {
    let shape = store.get(name).map(|t| t.shape().to_vec()).unwrap_or_else(|| panic!("no parameter `{name}`"));
    store.insert(name, f(&shape));
}
