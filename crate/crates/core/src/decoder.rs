//! Attention decoder, multi-scale fusion and Sobel boundary refinement.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv2dOpts, Graph, Pool, Var};
use crate::error::{Error, Result};
use crate::nn::{self, ParamStore, Session};
use crate::tensor::Tensor;

pub const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
pub const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
pub const SOBEL_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub base_widths: Vec<usize>,
    pub width_multiplier: f64,
    pub reduction: usize,
    pub num_classes: usize,
    /// Fused resolution as a multiple of the encoder grid.
    pub fused_scale: usize,
    /// Width of the refinement features; the final stage width when unset.
    pub brm_width: Option<usize>,
    pub attention: bool,
    pub multi_scale: bool,
    pub brm: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            base_widths: vec![512, 256, 128, 64],
            width_multiplier: 0.125,
            reduction: 16,
            num_classes: 4,
            fused_scale: 4,
            brm_width: None,
            attention: true,
            multi_scale: true,
            brm: true,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_widths.len() < 2 {
            return Err(Error::Config("decoder needs at least two widths".into()));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return Err(Error::Config(format!("width multiplier {} must be positive", self.width_multiplier)));
        }
        if self.reduction == 0 || self.num_classes < 2 || self.fused_scale == 0 {
            return Err(Error::Config("reduction, fused scale must be ≥ 1 and classes ≥ 2".into()));
        }
        if self.brm_width == Some(0) {
            return Err(Error::Config("brm width must be positive".into()));
        }
        Ok(())
    }

    pub fn widths(&self) -> Vec<usize> {
        self.base_widths.iter().map(|&w| ((w as f64 * self.width_multiplier).round() as usize).max(1)).collect()
    }

    pub fn stages(&self) -> usize {
        self.base_widths.len() - 1
    }

    pub fn feature_width(&self) -> usize {
        self.brm_width.unwrap_or(*self.widths().last().unwrap())
    }

    /// Largest divisor of `width` not exceeding the configured ratio.
    pub fn reduction_for(&self, width: usize) -> usize {
        (1..=self.reduction.min(width)).rev().find(|r| width % r == 0).unwrap_or(1)
    }
}

pub fn init<R: Rng + ?Sized>(cfg: &DecoderConfig, in_channels: usize, store: &mut ParamStore, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let w = cfg.widths();
    let fw = cfg.feature_width();
    nn::init_conv(store, rng, "decoder.proj_in", w[0], in_channels, 1, true);
    for l in 1..=cfg.stages() {
        let p = format!("decoder.stage{l}");
        let (cin, cout) = (w[l - 1], w[l]);
        let std = (2.0 / (cin * 4) as f64).sqrt() * 2.0;
        store.insert(format!("{p}.up.weight"), Tensor::randn(&[cin, cout, 2, 2], std, rng));
        store.insert(format!("{p}.up.bias"), Tensor::zeros(&[cout]));
        nn::init_conv(store, rng, &format!("{p}.res.conv1"), cout, cout, 3, true);
        nn::init_conv(store, rng, &format!("{p}.res.conv2"), cout, cout, 3, true);
        if cfg.attention {
            let hidden = cout / cfg.reduction_for(cout);
            store.insert(format!("{p}.se.fc1.weight"), Tensor::randn(&[hidden, cout], (2.0 / cout as f64).sqrt(), rng));
            store.insert(format!("{p}.se.fc1.bias"), Tensor::zeros(&[hidden]));
            store.insert(format!("{p}.se.fc2.weight"), Tensor::randn(&[cout, hidden], (1.0 / hidden as f64).sqrt(), rng));
            store.insert(format!("{p}.se.fc2.bias"), Tensor::zeros(&[cout]));
            nn::init_conv(store, rng, &format!("{p}.sa"), 1, 2, 7, true);
        }
    }
    if cfg.multi_scale {
        for l in 1..=cfg.stages() {
            nn::init_conv(store, rng, &format!("decoder.ms.proj{l}"), fw, w[l], 1, true);
        }
        nn::init_conv(store, rng, "decoder.ms.reduce", fw, fw * cfg.stages(), 1, true);
    }
    let wd = *w.last().unwrap();
    if cfg.brm {
        nn::init_conv(store, rng, "brm.edge", 1, wd, 1, true);
        nn::init_conv(store, rng, "brm.merge", fw, wd + 1, 3, true);
        nn::init_conv(store, rng, "brm.grad", fw, fw, 1, true);
    } else {
        nn::init_conv(store, rng, "head.proj", fw, wd, 1, true);
    }
    nn::init_conv(store, rng, "head.fuse", fw, fw, 3, true);
    nn::init_conv(store, rng, "head.cls", cfg.num_classes, fw, 1, true);
    Ok(())
}

/// `M_c = σ(W_2 · relu(W_1 · GAP(U) + b_1) + b_2)`, shape `[B,C]`.
pub fn channel_attention(s: &mut Session, u: Var, prefix: &str) -> Result<Var> {
    let w1 = s.p(&format!("{prefix}.fc1.weight"))?;
    let w2 = s.p(&format!("{prefix}.fc2.weight"))?;
    let c = s.g.shape(u)[1];
    if s.g.shape(w1)[1] != c || s.g.shape(w2)[0] != c || s.g.shape(w2)[1] != s.g.shape(w1)[0] {
        return Err(Error::Shape(format!(
            "bottleneck {:?}/{:?} does not fit {c} channels",
            s.g.shape(w1),
            s.g.shape(w2)
        )));
    }
    let b1 = s.p(&format!("{prefix}.fc1.bias"))?;
    let b2 = s.p(&format!("{prefix}.fc2.bias"))?;
    let z = s.g.pool(Pool::GlobalAvg, u)?;
    let w1t = s.g.transpose(w1)?;
    let h = s.g.matmul(z, w1t)?;
    let h = s.g.add(h, b1)?;
    let h = s.g.relu(h);
    let w2t = s.g.transpose(w2)?;
    let o = s.g.matmul(h, w2t)?;
    let o = s.g.add(o, b2)?;
    Ok(s.g.sigmoid(o))
}

/// `M_s = σ(Conv7×7([avg_c(U) ∥ max_c(U)]))`, shape `[B,1,H,W]`.
pub fn spatial_attention(s: &mut Session, u: Var, prefix: &str) -> Result<Var> {
    let avg = s.g.pool(Pool::ChannelAvg, u)?;
    let max = s.g.pool(Pool::ChannelMax, u)?;
    let cat = s.g.concat(&[avg, max], 1)?;
    let o = s.conv(cat, prefix, Conv2dOpts::same(3))?;
    Ok(s.g.sigmoid(o))
}

/// `relu(u + conv3(relu(conv3(u))))`
pub fn residual_block(s: &mut Session, u: Var, prefix: &str) -> Result<Var> {
    let h = s.conv(u, &format!("{prefix}.conv1"), Conv2dOpts::same(1))?;
    let h = s.g.relu(h);
    let h = s.conv(h, &format!("{prefix}.conv2"), Conv2dOpts::same(1))?;
    let o = s.g.add(u, h)?;
    Ok(s.g.relu(o))
}

/// Scale by `M_c: [B,C]` over space, then by `M_s: [B,1,H,W]` over channels.
pub fn gate(g: &mut Graph, r: Var, mc: Var, ms: Var) -> Result<Var> {
    let (b, c) = (g.shape(mc)[0], g.shape(mc)[1]);
    let mc = g.reshape(mc, &[b, c, 1, 1])?;
    let r = g.mul(r, mc)?;
    g.mul(r, ms)
}

/// One stage: 2× transposed-conv upsampling, residual block, then the
/// channel and spatial gates when attention is enabled.
pub fn decode_stage(s: &mut Session, cfg: &DecoderConfig, u: Var, l: usize) -> Result<Var> {
    if l == 0 || l > cfg.stages() {
        return Err(Error::Config(format!("stage {l} outside 1..={}", cfg.stages())));
    }
    let p = format!("decoder.stage{l}");
    let w = s.p(&format!("{p}.up.weight"))?;
    let b = s.p(&format!("{p}.up.bias"))?;
    let up = s.g.conv_transpose2d(u, w, Some(b), 2, 0)?;
    let r = residual_block(s, up, &format!("{p}.res"))?;
    if !cfg.attention {
        return Ok(r);
    }
    let mc = channel_attention(s, r, &format!("{p}.se"))?;
    let (bn, c) = (s.g.shape(mc)[0], s.g.shape(mc)[1]);
    let mc4 = s.g.reshape(mc, &[bn, c, 1, 1])?;
    let rc = s.g.mul(r, mc4)?;
    let ms = spatial_attention(s, rc, &format!("{p}.sa"))?;
    s.g.mul(rc, ms)
}

/// Resize every stage to `size×size`, project each to the common width,
/// concatenate and reduce with a 1×1 convolution.
pub fn multi_scale_fuse(s: &mut Session, stages: &[Var], size: usize) -> Result<Var> {
    if stages.is_empty() {
        return Err(Error::Shape("no stage outputs to fuse".into()));
    }
    let mut parts = Vec::with_capacity(stages.len());
    for (i, &u) in stages.iter().enumerate() {
        let r = s.g.interpolate_bilinear(u, size, size)?;
        parts.push(s.conv(r, &format!("decoder.ms.proj{}", i + 1), Conv2dOpts::default())?);
    }
    let cat = s.g.concat(&parts, 1)?;
    s.conv(cat, "decoder.ms.reduce", Conv2dOpts::default())
}

fn sobel_kernel(channels: usize, k: &[[f64; 3]; 3]) -> Tensor {
    let mut t = Tensor::zeros(&[channels, 1, 3, 3]);
    for c in 0..channels {
        for i in 0..3 {
            for j in 0..3 {
                t.set(&[c, 0, i, j], k[i][j]);
            }
        }
    }
    t
}

/// Per-channel `sqrt((X*G_x)² + (X*G_y)² + ε_s)` with zero padding 1.
pub fn sobel_gradients(g: &mut Graph, x: Var) -> Result<Var> {
    let c = g.shape(x)[1];
    let kx = g.constant(sobel_kernel(c, &SOBEL_X));
    let ky = g.constant(sobel_kernel(c, &SOBEL_Y));
    let gx = g.conv2d(x, kx, None, Conv2dOpts::depthwise(c, 1))?;
    let gy = g.conv2d(x, ky, None, Conv2dOpts::depthwise(c, 1))?;
    let gx2 = g.square(gx);
    let gy2 = g.square(gy);
    let m = g.add(gx2, gy2)?;
    let m = g.add_scalar(m, SOBEL_EPS);
    Ok(g.sqrt(m))
}

pub struct BrmOutput {
    pub logits: Var,
    pub edge: Var,
    pub refined: Var,
    pub boundary: Var,
}

/// `E = σ(φ(F_d))`, `F̃_d = ψ([F_d ∥ E])`, `F_b = F̃_d + Δ(|∇F̃_d|)`,
/// `F_out = relu(Conv3×3(F_b + F_ms))`, `Ŷ = Conv1×1(F_out)`.
pub fn brm_forward(s: &mut Session, fd: Var, fms: Option<Var>) -> Result<BrmOutput> {
    if let Some(m) = fms {
        if s.g.shape(m)[2..] != s.g.shape(fd)[2..] || s.g.shape(m)[0] != s.g.shape(fd)[0] {
            return Err(Error::Shape(format!("F_d {:?} and F_ms {:?} are misaligned", s.g.shape(fd), s.g.shape(m))));
        }
    }
    let e = s.conv(fd, "brm.edge", Conv2dOpts::default())?;
    let edge = s.g.sigmoid(e);
    let cat = s.g.concat(&[fd, edge], 1)?;
    let refined = s.conv(cat, "brm.merge", Conv2dOpts::same(1))?;
    let mag = sobel_gradients(s.g, refined)?;
    let delta = s.conv(mag, "brm.grad", Conv2dOpts::default())?;
    let boundary = s.g.add(refined, delta)?;
    let logits = head(s, boundary, fms)?;
    Ok(BrmOutput { logits, edge, refined, boundary })
}

fn head(s: &mut Session, feat: Var, fms: Option<Var>) -> Result<Var> {
    let x = match fms {
        Some(m) => s.g.add(feat, m)?,
        None => feat,
    };
    let o = s.conv(x, "head.fuse", Conv2dOpts::same(1))?;
    let o = s.g.relu(o);
    s.conv(o, "head.cls", Conv2dOpts::default())
}

pub fn upsample_logits(g: &mut Graph, logits: Var, h: usize, w: usize) -> Result<Var> {
    g.interpolate_bilinear(logits, h, w)
}

pub struct DecoderOutput {
    /// Logits at the fused resolution.
    pub logits: Var,
    pub edge: Option<Var>,
}

/// `F' → Ŷ` at the fused resolution `grid · fused_scale`.
pub fn forward(s: &mut Session, cfg: &DecoderConfig, f: Var) -> Result<DecoderOutput> {
    cfg.validate()?;
    let grid = s.g.shape(f)[2];
    let fused = grid * cfg.fused_scale;
    let mut u = s.conv(f, "decoder.proj_in", Conv2dOpts::default())?;
    let mut stages = Vec::with_capacity(cfg.stages());
    for l in 1..=cfg.stages() {
        u = decode_stage(s, cfg, u, l)?;
        stages.push(u);
    }
    let fms = if cfg.multi_scale { Some(multi_scale_fuse(s, &stages, fused)?) } else { None };
    let fd = s.g.interpolate_bilinear(u, fused, fused)?;
    if cfg.brm {
        let o = brm_forward(s, fd, fms)?;
        Ok(DecoderOutput { logits: o.logits, edge: Some(o.edge) })
    } else {
        let feat = s.conv(fd, "head.proj", Conv2dOpts::default())?;
        Ok(DecoderOutput { logits: head(s, feat, fms)?, edge: None })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::sigmoid;
    use crate::csam::set_param;
    use crate::gradcheck::GradCheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn tiny() -> DecoderConfig {
        DecoderConfig { base_widths: vec![6, 4, 3], width_multiplier: 1.0, reduction: 2, brm_width: Some(3), ..Default::default() }
    }

    fn setup(cfg: &DecoderConfig, cin: usize, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        init(cfg, cin, &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        store
    }

    fn eval<T>(store: &ParamStore, f: impl FnOnce(&mut Session) -> T) -> T {
        let mut g = Graph::no_grad();
        let mut s = Session::new(&mut g, store);
        f(&mut s)
    }

    fn conv_oracle(x: &Tensor, b: usize, c: usize, k: &[[f64; 3]; 3]) -> Vec<f64> {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        let (yy, xj) = (y as isize + i as isize - 1, xx as isize + j as isize - 1);
                        if yy >= 0 && xj >= 0 && (yy as usize) < h && (xj as usize) < w {
                            acc += k[i][j] * x.at(&[b, c, yy as usize, xj as usize]);
                        }
                    }
                }
                out[y * w + xx] = acc;
            }
        }
        out
    }

    #[test]
    fn sobel_kernels_are_the_fixed_arrays() {
        assert_eq!(SOBEL_X, [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]);
        assert_eq!(SOBEL_Y, [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]]);
    }

    #[test]
    fn sobel_flat_step_and_oracle() {
        let mut g = Graph::no_grad();
        let flat = g.constant(Tensor::full(&[1, 2, 5, 5], 3.0));
        let m = sobel_gradients(&mut g, flat).unwrap();
        // interior only: zero padding creates edges at the border
        for y in 1..4 {
            for x in 1..4 {
                assert!(g.value(m).at(&[0, 1, y, x]) <= SOBEL_EPS.sqrt() * 1.0000001);
            }
        }

        let step = Tensor::new(&[1, 1, 3, 3], vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = g.constant(step);
        let m = sobel_gradients(&mut g, v).unwrap();
        assert!((g.value(m).at(&[0, 0, 1, 1]) - 4.0).abs() < 1e-12);

        let mut diag = Tensor::zeros(&[2, 3, 7, 7]);
        for b in 0..2 {
            for c in 0..3 {
                for y in 0..7 {
                    for x in 0..7 {
                        if x + b >= y + c {
                            diag.set(&[b, c, y, x], 1.0 + c as f64);
                        }
                    }
                }
            }
        }
        let noisy = {
            let n = randn(&[2, 3, 7, 7], 1);
            Tensor::new(diag.shape(), diag.data().iter().zip(n.data()).map(|(a, b)| a + 0.1 * b).collect()).unwrap()
        };
        for t in [diag, noisy] {
            let v = g.constant(t.clone());
            let m = sobel_gradients(&mut g, v).unwrap();
            for b in 0..2 {
                for c in 0..3 {
                    let gx = conv_oracle(&t, b, c, &SOBEL_X);
                    let gy = conv_oracle(&t, b, c, &SOBEL_Y);
                    for i in 0..49 {
                        let want = (gx[i] * gx[i] + gy[i] * gy[i] + SOBEL_EPS).sqrt();
                        assert!((g.value(m).at(&[b, c, i / 7, i % 7]) - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn channel_attention_cases() {
        let cfg = tiny();
        let mut store = setup(&cfg, 5, 2);
        let p = "decoder.stage1.se";
        let u = randn(&[2, 4, 3, 3], 3);
        let w1 = store.get(&format!("{p}.fc1.weight")).unwrap().clone();
        set_param(&mut store, &format!("{p}.fc1.bias"), |s| randn(s, 4));
        set_param(&mut store, &format!("{p}.fc2.bias"), |s| randn(s, 5));
        let (b1, w2, b2) = (
            store.get(&format!("{p}.fc1.bias")).unwrap().clone(),
            store.get(&format!("{p}.fc2.weight")).unwrap().clone(),
            store.get(&format!("{p}.fc2.bias")).unwrap().clone(),
        );
        let got = eval(&store, |s| {
            let v = s.g.constant(u.clone());
            let m = channel_attention(s, v, p).unwrap();
            s.g.value(m).clone()
        });
        assert_eq!(got.shape(), &[2, 4]);
        let hid = w1.shape()[0];
        for b in 0..2 {
            let z: Vec<f64> = (0..4).map(|c| (0..9).map(|i| u.at(&[b, c, i / 3, i % 3])).sum::<f64>() / 9.0).collect();
            let h: Vec<f64> =
                (0..hid).map(|j| (b1.data()[j] + (0..4).map(|c| w1.at(&[j, c]) * z[c]).sum::<f64>()).max(0.0)).collect();
            for c in 0..4 {
                let o = b2.data()[c] + (0..hid).map(|j| w2.at(&[c, j]) * h[j]).sum::<f64>();
                assert!((got.at(&[b, c]) - sigmoid(o)).abs() < 1e-12);
                assert!(got.at(&[b, c]) > 0.0 && got.at(&[b, c]) < 1.0);
            }
        }

        set_param(&mut store, &format!("{p}.fc2.weight"), Tensor::zeros);
        set_param(&mut store, &format!("{p}.fc2.bias"), Tensor::zeros);
        eval(&store, |s| {
            let v = s.g.constant(u.clone());
            let m = channel_attention(s, v, p).unwrap();
            assert!(s.g.value(m).data().iter().all(|&x| x == 0.5));
        });

        // a constant input gives the same gate at any spatial size
        let store = setup(&cfg, 5, 6);
        let a = eval(&store, |s| {
            let v = s.g.constant(Tensor::full(&[1, 4, 2, 2], 0.7));
            let m = channel_attention(s, v, p).unwrap();
            s.g.value(m).clone()
        });
        let b = eval(&store, |s| {
            let v = s.g.constant(Tensor::full(&[1, 4, 5, 3], 0.7));
            let m = channel_attention(s, v, p).unwrap();
            s.g.value(m).clone()
        });
        assert!(a.max_abs_diff(&b) < 1e-15);

        let bad = eval(&store, |s| {
            let v = s.g.constant(Tensor::zeros(&[1, 5, 2, 2]));
            channel_attention(s, v, p).is_err()
        });
        assert!(bad);
    }

    #[test]
    fn spatial_attention_cases() {
        let cfg = tiny();
        let mut store = setup(&cfg, 5, 7);
        let p = "decoder.stage2.sa";
        set_param(&mut store, &format!("{p}.bias"), |s| randn(s, 8));
        let u = randn(&[2, 5, 6, 4], 9);
        let w = store.get(&format!("{p}.weight")).unwrap().clone();
        let bias = store.get(&format!("{p}.bias")).unwrap().data()[0];
        let got = eval(&store, |s| {
            let v = s.g.constant(u.clone());
            let m = spatial_attention(s, v, p).unwrap();
            s.g.value(m).clone()
        });
        assert_eq!(got.shape(), &[2, 1, 6, 4]);
        for b in 0..2 {
            let mut avg = vec![0.0; 24];
            let mut max = vec![f64::NEG_INFINITY; 24];
            for c in 0..5 {
                for i in 0..24 {
                    let v = u.at(&[b, c, i / 4, i % 4]);
                    avg[i] += v / 5.0;
                    max[i] = max[i].max(v);
                }
            }
            for y in 0..6 {
                for x in 0..4 {
                    let mut acc = bias;
                    for (ch, plane) in [&avg, &max].iter().enumerate() {
                        for i in 0..7 {
                            for j in 0..7 {
                                let (yy, xx) = (y as isize + i as isize - 3, x as isize + j as isize - 3);
                                if yy >= 0 && xx >= 0 && yy < 6 && xx < 4 {
                                    acc += w.at(&[0, ch, i, j]) * plane[yy as usize * 4 + xx as usize];
                                }
                            }
                        }
                    }
                    assert!((got.at(&[b, 0, y, x]) - sigmoid(acc)).abs() < 1e-12);
                }
            }
        }
        set_param(&mut store, &format!("{p}.weight"), Tensor::zeros);
        set_param(&mut store, &format!("{p}.bias"), Tensor::zeros);
        eval(&store, |s| {
            let v = s.g.constant(randn(&[1, 7, 3, 3], 10));
            let m = spatial_attention(s, v, p).unwrap();
            assert!(s.g.value(m).data().iter().all(|&x| x == 0.5));
        });
    }

    #[test]
    fn unit_multiplier_stage_shape() {
        let cfg = DecoderConfig { width_multiplier: 1.0, ..Default::default() };
        assert_eq!(cfg.widths(), vec![512, 256, 128, 64]);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // only stage 1 is needed here
        store.insert("decoder.stage1.up.weight", Tensor::randn(&[512, 256, 2, 2], 0.03, &mut rng));
        store.insert("decoder.stage1.up.bias", Tensor::zeros(&[256]));
        nn::init_conv(&mut store, &mut rng, "decoder.stage1.res.conv1", 256, 256, 3, true);
        nn::init_conv(&mut store, &mut rng, "decoder.stage1.res.conv2", 256, 256, 3, true);
        store.insert("decoder.stage1.se.fc1.weight", Tensor::randn(&[16, 256], 0.1, &mut rng));
        store.insert("decoder.stage1.se.fc1.bias", Tensor::zeros(&[16]));
        store.insert("decoder.stage1.se.fc2.weight", Tensor::randn(&[256, 16], 0.1, &mut rng));
        store.insert("decoder.stage1.se.fc2.bias", Tensor::zeros(&[256]));
        nn::init_conv(&mut store, &mut rng, "decoder.stage1.sa", 1, 2, 7, true);
        eval(&store, |s| {
            let u = s.g.constant(randn(&[1, 512, 8, 8], 12));
            let o = decode_stage(s, &cfg, u, 1).unwrap();
            assert_eq!(s.g.shape(o), &[1, 256, 16, 16]);
        });
    }

    #[test]
    fn reduction_is_clamped_to_a_divisor() {
        let cfg = DecoderConfig::default();
        assert_eq!(cfg.reduction_for(64), 16);
        assert_eq!(cfg.reduction_for(8), 8);
        assert_eq!(cfg.reduction_for(24), 12);
        assert_eq!(cfg.reduction_for(7), 7);
    }

    #[test]
    fn neutral_gates_leave_the_residual_block() {
        let cfg = tiny();
        let store = setup(&cfg, 5, 13);
        let u = randn(&[2, 6, 3, 3], 14);
        eval(&store, |s| {
            let uv = s.g.constant(u.clone());
            let w = s.p("decoder.stage1.up.weight").unwrap();
            let b = s.p("decoder.stage1.up.bias").unwrap();
            let up = s.g.conv_transpose2d(uv, w, Some(b), 2, 0).unwrap();
            let r = residual_block(s, up, "decoder.stage1.res").unwrap();
            let ones_c = s.g.constant(Tensor::ones(&[2, 4]));
            let ones_s = s.g.constant(Tensor::ones(&[2, 1, 6, 6]));
            let gated = gate(s.g, r, ones_c, ones_s).unwrap();
            assert!(s.g.value(gated).bit_eq(s.g.value(r)));
            let plain = DecoderConfig { attention: false, ..cfg.clone() };
            let o = decode_stage(s, &plain, uv, 1).unwrap();
            assert!(s.g.value(o).bit_eq(s.g.value(r)));
            let o = decode_stage(s, &cfg, uv, 1).unwrap();
            assert_eq!(s.g.shape(o), &[2, 4, 6, 6]);
        });
    }

    #[test]
    fn multi_scale_shapes_and_constants() {
        let cfg = tiny();
        let mut store = setup(&cfg, 5, 15);
        let stages = [randn(&[1, 4, 4, 4], 16), randn(&[1, 3, 8, 8], 17)];
        eval(&store, |s| {
            let v: Vec<Var> = stages.iter().map(|t| s.g.constant(t.clone())).collect();
            for size in [3, 8, 16] {
                let m = multi_scale_fuse(s, &v, size).unwrap();
                assert_eq!(s.g.shape(m), &[1, 3, size, size]);
            }
        });
        // degenerate single stage: the reduce layer sees only the first projection
        set_param(&mut store, "decoder.ms.reduce.weight", |_| {
            let mut t = Tensor::zeros(&[3, 3, 1, 1]);
            for c in 0..3 {
                t.set(&[c, c, 0, 0], 1.0);
            }
            t
        });
        set_param(&mut store, "decoder.ms.reduce.bias", Tensor::zeros);
        eval(&store, |s| {
            let v = s.g.constant(stages[0].clone());
            let m = multi_scale_fuse(s, &[v], 6).unwrap();
            let r = s.g.interpolate_bilinear(v, 6, 6).unwrap();
            let p = s.conv(r, "decoder.ms.proj1", Conv2dOpts::default()).unwrap();
            assert!(s.g.value(m).max_abs_diff(s.g.value(p)) < 1e-15);
        });
        let store = setup(&cfg, 5, 18);
        eval(&store, |s| {
            let a = s.g.constant(Tensor::full(&[1, 4, 4, 4], 0.3));
            let b = s.g.constant(Tensor::full(&[1, 3, 8, 8], -1.2));
            let m = multi_scale_fuse(s, &[a, b], 16).unwrap();
            let t = s.g.value(m);
            for c in 0..3 {
                let v0 = t.at(&[0, c, 0, 0]);
                for i in 0..256 {
                    assert!((t.at(&[0, c, i / 16, i % 16]) - v0).abs() < 1e-12);
                }
            }
        });
    }

    #[test]
    fn zero_gradient_conv_gives_pure_residual() {
        let cfg = tiny();
        let mut store = setup(&cfg, 5, 19);
        set_param(&mut store, "brm.grad.weight", Tensor::zeros);
        set_param(&mut store, "brm.grad.bias", Tensor::zeros);
        eval(&store, |s| {
            let fd = s.g.constant(randn(&[2, 3, 8, 8], 20));
            let fms = s.g.constant(randn(&[2, 3, 8, 8], 21));
            let o = brm_forward(s, fd, Some(fms)).unwrap();
            assert_eq!(s.g.value(o.boundary).max_abs_diff(s.g.value(o.refined)), 0.0);
            assert!(s.g.value(o.edge).data().iter().all(|&e| e > 0.0 && e < 1.0));
            assert_eq!(s.g.shape(o.logits), &[2, 4, 8, 8]);
            let bad = s.g.constant(randn(&[2, 3, 4, 4], 22));
            assert!(brm_forward(s, fd, Some(bad)).is_err());
        });
    }

    #[test]
    fn upsample_logits_identity_and_argmax() {
        let mut g = Graph::no_grad();
        let l = randn(&[1, 4, 8, 8], 23);
        let v = g.constant(l.clone());
        let same = upsample_logits(&mut g, v, 8, 8).unwrap();
        assert!(g.value(same).bit_eq(&l));
        let mut cst = Tensor::zeros(&[2, 4, 4, 4]);
        for (i, x) in cst.data_mut().iter_mut().enumerate() {
            *x = [0.1, 2.0, -1.0, 0.5][(i / 16) % 4];
        }
        let v = g.constant(cst);
        let up = upsample_logits(&mut g, v, 16, 16).unwrap();
        assert_eq!(g.shape(up), &[2, 4, 16, 16]);
        for b in 0..2 {
            for p in 0..256 {
                let vals: Vec<f64> = (0..4).map(|c| g.value(up).at(&[b, c, p / 16, p % 16])).collect();
                let am = (0..4).max_by(|&a, &c| vals[a].total_cmp(&vals[c])).unwrap();
                assert_eq!(am, 1);
            }
        }
    }

    #[test]
    fn forward_shapes_for_every_switch_combination() {
        for bits in 0..8u8 {
            let cfg = DecoderConfig { attention: bits & 1 != 0, multi_scale: bits & 2 != 0, brm: bits & 4 != 0, ..tiny() };
            let store = setup(&cfg, 5, 24);
            eval(&store, |s| {
                let f = s.g.constant(randn(&[2, 5, 2, 2], 25));
                let o = forward(s, &cfg, f).unwrap();
                assert_eq!(s.g.shape(o.logits), &[2, 4, 8, 8]);
                assert_eq!(o.edge.is_some(), cfg.brm);
            });
        }
    }

    #[test]
    fn gradcheck_stage_attention_and_brm() {
        let cfg = tiny();
        let mut store = setup(&cfg, 5, 26);
        for n in ["decoder.stage1.se.fc1.bias", "decoder.stage1.se.fc2.bias", "decoder.stage1.sa.bias"] {
            set_param(&mut store, n, |s| Tensor::randn(s, 0.3, &mut ChaCha8Rng::seed_from_u64(27)));
        }
        let gc = GradCheck::default();
        let u = randn(&[1, 6, 2, 2], 28);
        let rep = gc
            .run_module("decode_stage", &store, "decoder.stage1.", &[("U", u.clone())], |s, v| {
                decode_stage(s, &cfg, v[0], 1)
            })
            .unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");

        let rep = gc
            .run_module("channel_attention", &store, "decoder.stage1.se.", &[("U", randn(&[2, 4, 3, 3], 29))], |s, v| {
                channel_attention(s, v[0], "decoder.stage1.se")
            })
            .unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");

        let rep = gc
            .run_module("spatial_attention", &store, "decoder.stage1.sa", &[("U", randn(&[2, 3, 4, 4], 30))], |s, v| {
                spatial_attention(s, v[0], "decoder.stage1.sa")
            })
            .unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");

        let rep = gc
            .run("sobel", &[("X", randn(&[1, 2, 5, 5], 31))], |g, v| sobel_gradients(g, v[0]))
            .unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");

        let inputs = [("F_d", randn(&[1, 3, 8, 8], 32)), ("F_ms", randn(&[1, 3, 8, 8], 33))];
        let rep = gc
            .probes(40)
            .run_module("brm", &store, "brm.", &inputs, |s, v| {
                Ok(brm_forward(s, v[0], Some(v[1]))?.logits)
            })
            .unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");
    }
}
