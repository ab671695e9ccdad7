//! AdamW with decoupled weight decay, parameter groups and cosine annealing.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::encoder;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupTag {
    Backbone,
    Decoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub tag: GroupTag,
    pub names: Vec<String>,
    pub base_lr: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }
}

/// Learning-rate presets. `desk` uses the differential scheme; `paper-s34`
/// uses the single training-protocol rate for the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrPreset {
    pub backbone_lr: f64,
    pub decoder_lr: f64,
    pub weight_decay: f64,
}

impl LrPreset {
    pub fn desk() -> Self {
        Self { backbone_lr: 1e-5, decoder_lr: 1e-3, weight_decay: 1e-4 }
    }

    pub fn paper_s34() -> Self {
        Self { backbone_lr: 1e-5, decoder_lr: 1e-4, weight_decay: 1e-4 }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper-s34" => Ok(Self::paper_s34()),
            _ => Err(Error::Config(format!("unknown optimizer preset `{name}`; expected desk or paper-s34"))),
        }
    }
}

/// Every trainable parameter in exactly one group. The encoder is left out
/// entirely when frozen.
pub fn build_groups(store: &ParamStore, freeze_backbone: bool, lr: &LrPreset) -> Result<Vec<ParamGroup>> {
    let (mut backbone, mut decoder) = (Vec::new(), Vec::new());
    for name in store.names() {
        if name.starts_with(encoder::PREFIX) {
            if !freeze_backbone {
                backbone.push(name.clone());
            }
        } else {
            decoder.push(name.clone());
        }
    }
    let groups = vec![
        ParamGroup { tag: GroupTag::Backbone, names: backbone, base_lr: lr.backbone_lr, weight_decay: lr.weight_decay },
        ParamGroup { tag: GroupTag::Decoder, names: decoder, base_lr: lr.decoder_lr, weight_decay: lr.weight_decay },
    ];
    check_groups(&groups)?;
    Ok(groups)
}

pub fn check_groups(groups: &[ParamGroup]) -> Result<()> {
    let mut seen = HashSet::new();
    for g in groups {
        for n in &g.names {
            if !seen.insert(n) {
                return Err(Error::Config(format!("parameter `{n}` claimed by two groups")));
            }
        }
    }
    Ok(())
}

/// One AdamW step; `lrs[i]` is the current rate of `groups[i]`.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &HashMap<String, Tensor>,
    groups: &[ParamGroup],
    state: &mut OptimizerState,
    lrs: &[f64],
) -> Result<()> {
    if lrs.len() != groups.len() {
        return Err(Error::Config(format!("{} learning rates for {} groups", lrs.len(), groups.len())));
    }
    for g in groups {
        for n in &g.names {
            let grad = grads.get(n).ok_or_else(|| Error::MissingWeights(format!("no gradient for `{n}`")))?;
            let p = store.get(n).ok_or_else(|| Error::MissingWeights(n.clone()))?;
            if grad.shape() != p.shape() {
                return Err(Error::Shape(format!("gradient of `{n}` is {:?}, parameter {:?}", grad.shape(), p.shape())));
            }
        }
    }
    state.step += 1;
    let AdamWConfig { beta1, beta2, eps } = state.cfg;
    let t = state.step as i32;
    let (bc1, bc2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
    for (g, &lr) in groups.iter().zip(lrs) {
        let shrink = 1.0 - lr * g.weight_decay;
        for n in &g.names {
            let grad = &grads[n];
            let p = store.get_mut(n).expect("checked above");
            let m = state.m.entry(n.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = state.v.entry(n.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            for (((pi, mi), vi), &gi) in
                p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(grad.data())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi = *pi * shrink - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
    Ok(())
}

/// `eta_min + ½(eta_max − eta_min)(1 + cos(πt/T))`, exact at both ends and
/// at the midpoint.
pub fn cosine_lr(t: usize, total: usize, eta_max: f64, eta_min: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Config("cosine schedule needs T > 0".into()));
    }
    if t > total {
        return Err(Error::Config(format!("step {t} beyond schedule length {total}")));
    }
    Ok(if t == 0 {
        eta_max
    } else if t == total {
        eta_min
    } else if 2 * t == total {
        0.5 * (eta_max + eta_min)
    } else {
        eta_min + 0.5 * (eta_max - eta_min) * (1.0 + (PI * t as f64 / total as f64).cos())
    })
}

/// Current rate of every group: each base rate annealed to `min_ratio` of itself.
pub fn group_lrs(groups: &[ParamGroup], t: usize, total: usize, min_ratio: f64) -> Result<Vec<f64>> {
    groups.iter().map(|g| cosine_lr(t, total, g.base_lr, g.base_lr * min_ratio)).collect()
}

/// `step,lr` rows for plotting.
pub fn schedule_csv(total: usize, eta_max: f64, eta_min: f64) -> Result<String> {
    let mut out = String::from("step,lr\n");
    for t in 0..=total {
        out.push_str(&format!("{t},{}\n", cosine_lr(t, total, eta_max, eta_min)?));
    }
    Ok(out)
}
