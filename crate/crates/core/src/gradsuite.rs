//! The full finite-difference suite: primitives, composed blocks, loss
//! terms and the end-to-end model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Conv2dOpts, Graph, Pool, Var};
use crate::config::RunConfig;
use crate::csam::{self, CsamConfig};
use crate::decoder::{self, DecoderConfig};
use crate::error::Result;
use crate::gradcheck::{GradCheck, GradCheckReport};
use crate::losses::{self, BoundarySides, LossConfig, LossTarget};
use crate::mask::Mask;
use crate::model;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const BLOCK_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct SuiteCheck {
    pub group: &'static str,
    pub tol: f64,
    pub report: GradCheckReport,
}

impl SuiteCheck {
    pub fn passes(&self) -> bool {
        self.report.passes(self.tol)
    }
}

fn randn(shape: &[usize], std: f64, seed: u64) -> Tensor {
    Tensor::randn(shape, std, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn random_masks(n: usize, h: usize, w: usize, classes: u8, seed: u64) -> Vec<Mask> {
    use rand::Rng;
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Mask::new(h, w, (0..h * w).map(|_| r.gen_range(0..classes)).collect()).expect("sized")).collect()
}

/// Zero-initialised tensors would hide whole branches from the check.
fn wake(store: &mut ParamStore, seed: u64) {
    let names: Vec<String> = store.iter().filter(|(_, t)| t.data().iter().all(|&v| v == 0.0)).map(|(n, _)| n.clone()).collect();
    for (i, n) in names.iter().enumerate() {
        csam::set_param(store, n, |s| randn(s, 0.3, seed + i as u64));
    }
}

fn primitives(out: &mut Vec<SuiteCheck>) -> Result<()> {
    type Op = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;
    let gc = GradCheck::default().seed(11);
    let a = randn(&[2, 3, 4], 1.0, 12);
    let b = randn(&[1, 3, 1], 1.0, 13);
    let pos = Tensor::uniform(&[2, 3, 4], 0.5, 2.0, &mut ChaCha8Rng::seed_from_u64(14));
    let c = randn(&[2, 2, 4], 1.0, 15);
    let m = randn(&[4, 5], 1.0, 16);
    let bm = randn(&[2, 4, 2], 1.0, 17);
    let x = randn(&[2, 4, 5, 5], 1.0, 18);
    let w = randn(&[6, 2, 3, 3], 0.5, 19);
    let bias6 = randn(&[6], 0.5, 20);
    let wd = randn(&[4, 1, 3, 3], 0.5, 21);
    let wt = randn(&[4, 3, 2, 2], 0.5, 22);
    let bt = randn(&[3], 0.5, 23);
    let ln_x = randn(&[3, 4, 6], 1.0, 24);
    let gain = randn(&[6], 1.0, 25);
    let img = randn(&[2, 3, 4, 5], 1.0, 26);

    let cases: Vec<(&str, Vec<(&str, Tensor)>, Op)> = vec![
        ("add", vec![("a", a.clone()), ("b", b.clone())], Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", vec![("a", a.clone()), ("b", b.clone())], Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", vec![("a", a.clone()), ("b", b.clone())], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("div", vec![("a", a.clone()), ("p", pos.clone())], Box::new(|g, v| g.div(v[0], v[1]))),
        ("scale", vec![("a", a.clone())], Box::new(|g, v| Ok(g.scale(v[0], -2.5)))),
        ("add_scalar", vec![("a", a.clone())], Box::new(|g, v| Ok(g.add_scalar(v[0], 0.3)))),
        ("exp", vec![("a", a.clone())], Box::new(|g, v| Ok(g.exp(v[0])))),
        ("ln", vec![("p", pos.clone())], Box::new(|g, v| Ok(g.ln(v[0])))),
        ("sqrt", vec![("p", pos.clone())], Box::new(|g, v| Ok(g.sqrt(v[0])))),
        ("square", vec![("a", a.clone())], Box::new(|g, v| Ok(g.square(v[0])))),
        ("powf", vec![("p", pos.clone())], Box::new(|g, v| Ok(g.powf(v[0], 1.7)))),
        ("clamp_min", vec![("a", a.clone())], Box::new(|g, v| Ok(g.clamp_min(v[0], 0.05)))),
        ("relu", vec![("a", a.clone())], Box::new(|g, v| Ok(g.relu(v[0])))),
        ("sigmoid", vec![("a", a.clone())], Box::new(|g, v| Ok(g.sigmoid(v[0])))),
        ("gelu", vec![("a", a.clone())], Box::new(|g, v| Ok(g.gelu(v[0])))),
        ("sum", vec![("a", a.clone())], Box::new(|g, v| Ok(g.sum(v[0])))),
        ("mean", vec![("a", a.clone())], Box::new(|g, v| Ok(g.mean(v[0])))),
        ("sum_axes", vec![("a", a.clone())], Box::new(|g, v| g.sum_axes(v[0], &[0, 2]))),
        ("reshape", vec![("a", a.clone())], Box::new(|g, v| g.reshape(v[0], &[6, 4]))),
        ("permute", vec![("a", a.clone())], Box::new(|g, v| g.permute(v[0], &[2, 0, 1]))),
        ("transpose", vec![("a", a.clone())], Box::new(|g, v| g.transpose(v[0]))),
        ("narrow", vec![("a", a.clone())], Box::new(|g, v| g.narrow(v[0], 1, 1, 2))),
        ("concat", vec![("a", a.clone()), ("c", c)], Box::new(|g, v| g.concat(&[v[0], v[1], v[0]], 1))),
        ("matmul", vec![("a", a.clone()), ("m", m)], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("matmul_batched", vec![("a", a), ("bm", bm)], Box::new(|g, v| g.matmul(v[0], v[1]))),
        (
            "conv2d",
            vec![("x", x.clone()), ("w", w), ("b", bias6)],
            Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), Conv2dOpts { stride: 2, padding: 1, groups: 2 })),
        ),
        ("conv2d_depthwise", vec![("x", x.clone()), ("w", wd)], Box::new(|g, v| g.conv2d(v[0], v[1], None, Conv2dOpts::depthwise(4, 1)))),
        ("conv_transpose2d", vec![("x", x), ("w", wt), ("b", bt)], Box::new(|g, v| g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 0))),
        ("softmax", vec![("x", ln_x.clone())], Box::new(|g, v| g.softmax(v[0], 1))),
        (
            "layer_norm",
            vec![("x", ln_x), ("gain", gain.clone()), ("bias", gain)],
            Box::new(|g, v| g.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-5)),
        ),
        ("global_avg_pool", vec![("x", img.clone())], Box::new(|g, v| g.pool(Pool::GlobalAvg, v[0]))),
        ("channel_avg_pool", vec![("x", img.clone())], Box::new(|g, v| g.pool(Pool::ChannelAvg, v[0]))),
        ("channel_max_pool", vec![("x", img.clone())], Box::new(|g, v| g.pool(Pool::ChannelMax, v[0]))),
        ("bilinear", vec![("x", img)], Box::new(|g, v| g.interpolate_bilinear(v[0], 7, 9))),
    ];
    for (name, inputs, f) in cases {
        let report = gc.run(name, &inputs, |g, v| f(g, v))?;
        out.push(SuiteCheck { group: "primitive", tol: BLOCK_TOL, report });
    }
    Ok(())
}

fn blocks(out: &mut Vec<SuiteCheck>) -> Result<()> {
    let gc = GradCheck::default();
    let mut push = |report| out.push(SuiteCheck { group: "block", tol: BLOCK_TOL, report });

    let ccfg = CsamConfig { channels: 4, structures: 2, key_dim: 3, heads: 2 };
    let mut store = ParamStore::new();
    csam::init(&ccfg, &mut store, &mut ChaCha8Rng::seed_from_u64(50))?;
    wake(&mut store, 51);
    push(gc.run_module("csam", &store, "csam.", &[("F", randn(&[1, 4, 2, 3], 1.0, 53))], |s, v| csam::forward(s, &ccfg, v[0]))?);

    let dcfg = DecoderConfig { base_widths: vec![6, 4, 3], width_multiplier: 1.0, reduction: 2, brm_width: Some(3), ..Default::default() };
    let mut store = ParamStore::new();
    decoder::init(&dcfg, 5, &mut store, &mut ChaCha8Rng::seed_from_u64(26))?;
    wake(&mut store, 27);
    push(gc.run_module("se_attention", &store, "decoder.stage1.se.", &[("U", randn(&[2, 4, 3, 3], 1.0, 29))], |s, v| {
        decoder::channel_attention(s, v[0], "decoder.stage1.se")
    })?);
    push(gc.run_module("spatial_attention", &store, "decoder.stage1.sa", &[("U", randn(&[2, 3, 4, 4], 1.0, 30))], |s, v| {
        decoder::spatial_attention(s, v[0], "decoder.stage1.sa")
    })?);
    push(gc.run_module("decoder_stage", &store, "decoder.stage1.", &[("U", randn(&[1, 6, 2, 2], 1.0, 28))], |s, v| {
        decoder::decode_stage(s, &dcfg, v[0], 1)
    })?);
    push(gc.run("sobel", &[("X", randn(&[1, 2, 5, 5], 1.0, 31))], |g, v| decoder::sobel_gradients(g, v[0]))?);
    let inputs = [("F_d", randn(&[1, 3, 8, 8], 1.0, 32)), ("F_ms", randn(&[1, 3, 8, 8], 1.0, 33))];
    push(gc.clone().probes(40).run_module("brm", &store, "brm.", &inputs, |s, v| Ok(decoder::brm_forward(s, v[0], Some(v[1]))?.logits))?);
    push(gc.clone().probes(40).run_module("decoder", &store, "", &[("F", randn(&[1, 5, 2, 2], 1.0, 34))], |s, v| {
        Ok(decoder::forward(s, &dcfg, v[0])?.logits)
    })?);
    Ok(())
}

fn loss_terms(out: &mut Vec<SuiteCheck>) -> Result<()> {
    type Term<'a> = Box<dyn Fn(&mut Graph, Var) -> Result<Var> + 'a>;
    let masks = random_masks(2, 5, 6, 4, 60);
    let t = LossTarget::new(&masks, 4, 5.0, BoundarySides::Both)?;
    let cfg = LossConfig::default();
    let inputs = [("logits", randn(&[2, 4, 5, 6], 1.0, 62))];
    let gc = GradCheck::default();
    let terms: Vec<(&str, Term)> = vec![
        ("dice_loss", Box::new(|g, p| losses::dice_loss(g, p, &t.onehot, 1.0))),
        ("focal_loss", Box::new(|g, p| losses::focal_loss(g, p, &t.onehot, &[1.0, 2.0, 0.5, 1.0], 2.0))),
        ("boundary_loss", Box::new(|g, p| losses::boundary_loss(g, p, &t.onehot, &t.boundary_weights))),
        ("struct_loss", Box::new(|g, p| losses::struct_loss(g, p, &cfg.adjacency))),
    ];
    for (name, f) in &terms {
        let report = gc.run(name, &inputs, |g, v| {
            let p = g.softmax(v[0], 1)?;
            f(g, p)
        })?;
        out.push(SuiteCheck { group: "loss", tol: BLOCK_TOL, report });
    }
    let report = gc.run("composite_loss", &inputs, |g, v| Ok(losses::composite_loss(g, v[0], &t, &cfg)?.0))?;
    out.push(SuiteCheck { group: "loss", tol: BLOCK_TOL, report });
    Ok(())
}

/// Small full network on a 32×32 input, encoder unfrozen so every
/// parameter is checked, under the composite loss.
pub fn end_to_end(probes: usize) -> Result<SuiteCheck> {
    let mut cfg = RunConfig::desk();
    for (k, v) in [("input_size", "32"), ("embed_dim", "16"), ("depth", "1"), ("heads", "2"), ("csam_heads", "2"), ("width_multiplier", "0.03125")] {
        cfg.set(k, v)?;
    }
    cfg.model.freeze_backbone = false;
    let mut store = model::init(&cfg.model, 70)?;
    wake(&mut store, 71);
    let masks = random_masks(1, 32, 32, 4, 72);
    let t = LossTarget::new(&masks, 4, cfg.loss.theta, cfg.loss.sides)?;
    let report = GradCheck::default().probes(probes).run_module("end_to_end", &store, "", &[("x", randn(&[1, 1, 32, 32], 1.0, 73))], |s, v| {
        let o = model::forward(s, &cfg.model, v[0])?;
        Ok(losses::composite_loss(s.g, o.logits, &t, &cfg.loss)?.0)
    })?;
    Ok(SuiteCheck { group: "model", tol: MODEL_TOL, report })
}

pub fn run_suite() -> Result<Vec<SuiteCheck>> {
    let mut out = Vec::new();
    primitives(&mut out)?;
    blocks(&mut out)?;
    loss_terms(&mut out)?;
    out.push(end_to_end(8)?);
    Ok(out)
}
