//! Composite segmentation objective: soft Dice, focal, distance-weighted
//! boundary and soft structural-adjacency terms.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv2dOpts, Graph, Var};
use crate::error::{Error, Result};
use crate::mask::{self, Mask};
use crate::tensor::Tensor;

pub const FOCAL_CLAMP: f64 = 1e-7;

/// Symmetric non-negative penalty for class pairs meeting across a
/// 4-neighbour edge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Adjacency(pub Vec<Vec<f64>>);

impl Adjacency {
    /// Only LV touching background is penalized.
    pub fn cardiac() -> Self {
        let mut a = vec![vec![0.0; 4]; 4];
        a[mask::LV as usize][mask::BG as usize] = 1.0;
        a[mask::BG as usize][mask::LV as usize] = 1.0;
        Adjacency(a)
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.0.len();
        for (i, row) in self.0.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Config(format!("adjacency row {i} has {} entries, expected {n}", row.len())));
            }
            for (j, &v) in row.iter().enumerate() {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(Error::Config(format!("adjacency[{i}][{j}] = {v} must be non-negative")));
                }
                if i == j && v != 0.0 {
                    return Err(Error::Config(format!("adjacency diagonal [{i}][{i}] must be 0")));
                }
                if self.0[j][i] != v {
                    return Err(Error::Config(format!("adjacency not symmetric at [{i}][{j}]")));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a: Adjacency = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        a.validate()?;
        Ok(a)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    fn as_kernel(&self) -> Tensor {
        let n = self.classes();
        Tensor::new(&[n, n, 1, 1], self.0.iter().flatten().copied().collect()).expect("square matrix")
    }
}

/// Which side of a class edge counts as boundary for the distance map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundarySides {
    Inner,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub focal_gamma: f64,
    pub theta: f64,
    pub dice_eps: f64,
    pub class_weights: Vec<f64>,
    pub sides: BoundarySides,
    pub adjacency: Adjacency,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.3,
            gamma: 0.2,
            lambda: 0.1,
            focal_gamma: 2.0,
            theta: 5.0,
            dice_eps: 1.0,
            class_weights: vec![1.0; 4],
            sides: BoundarySides::Both,
            adjacency: Adjacency::cardiac(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma), ("lambda", self.lambda)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {n} = {v} must be non-negative")));
            }
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::Config("focal gamma must be non-negative".into()));
        }
        if !(self.theta > 0.0) || !(self.dice_eps > 0.0) {
            return Err(Error::Config("theta and dice eps must be positive".into()));
        }
        if self.class_weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::Config("focal class weights must be non-negative".into()));
        }
        if self.class_weights.len() != self.adjacency.classes() {
            return Err(Error::Config(format!(
                "{} class weights for a {}-class adjacency",
                self.class_weights.len(),
                self.adjacency.classes()
            )));
        }
        self.adjacency.validate()
    }

    pub fn with_terms(&self, dice: bool, focal: bool, boundary: bool, structural: bool) -> Self {
        let d = Self::default();
        Self {
            alpha: if dice { d.alpha } else { 0.0 },
            beta: if focal { d.beta } else { 0.0 },
            gamma: if boundary { d.gamma } else { 0.0 },
            lambda: if structural { d.lambda } else { 0.0 },
            ..self.clone()
        }
    }
}

/// The loss-term configurations of the loss ablation, in table order.
pub fn loss_presets() -> Vec<(&'static str, LossConfig)> {
    let d = LossConfig::default();
    vec![
        ("L_Dice Only", d.with_terms(true, false, false, false)),
        ("L_Boundary Only", d.with_terms(false, false, true, false)),
        ("L_Focal Only", d.with_terms(false, true, false, false)),
        ("L_Dice + L_Focal", d.with_terms(true, true, false, false)),
        ("L_Dice + L_Boundary", d.with_terms(true, false, true, false)),
        ("L_Hybrid", d),
    ]
}

/// Dice plus plain cross-entropy, the objective of the baseline decoder.
pub fn dice_ce() -> LossConfig {
    LossConfig { focal_gamma: 0.0, ..LossConfig::default().with_terms(true, true, false, false) }
}

/// Distance from every pixel to the nearest boundary pixel of `class`;
/// all zeros when the class has no boundary.
pub fn distance_transform(m: &Mask, class: u8, sides: BoundarySides) -> Vec<f64> {
    let (h, w) = (m.h(), m.w());
    let bin = m.binary(class);
    let mut seeds = mask::inner_boundary(&bin, h, w);
    if sides == BoundarySides::Both {
        for (s, o) in seeds.iter_mut().zip(mask::outer_boundary(&bin, h, w)) {
            *s |= o;
        }
    }
    mask::edt(&seeds, h, w).unwrap_or_else(|| vec![0.0; h * w])
}

/// Precomputed per-batch targets: one-hot labels and `exp(−D/θ)` weights.
#[derive(Clone, Debug)]
pub struct LossTarget {
    pub onehot: Tensor,
    pub boundary_weights: Tensor,
}

impl LossTarget {
    pub fn new(masks: &[Mask], classes: usize, theta: f64, sides: BoundarySides) -> Result<Self> {
        let onehot = mask::one_hot(masks, classes)?;
        let mut wts = Tensor::zeros(onehot.shape());
        let plane = masks[0].h() * masks[0].w();
        for (b, m) in masks.iter().enumerate() {
            for c in 0..classes {
                let d = distance_transform(m, c as u8, sides);
                let off = (b * classes + c) * plane;
                for (dst, dv) in wts.data_mut()[off..off + plane].iter_mut().zip(d) {
                    *dst = (-dv / theta).exp();
                }
            }
        }
        Ok(Self { onehot, boundary_weights: wts })
    }
}

fn check_same(g: &Graph, p: Var, y: &Tensor) -> Result<()> {
    if g.shape(p) != y.shape() || y.ndim() != 4 {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", g.shape(p), y.shape())));
    }
    Ok(())
}

/// `1 − mean_{c≥1} (2Σpy + ε)/(Σp² + Σy² + ε)`, sums over batch and space.
pub fn dice_loss(g: &mut Graph, p: Var, y: &Tensor, eps: f64) -> Result<Var> {
    check_same(g, p, y)?;
    let c = y.shape()[1];
    let yv = g.constant(y.clone());
    let py = g.mul(p, yv)?;
    let inter = g.sum_axes(py, &[0, 2, 3])?;
    let p2 = g.square(p);
    let p2 = g.sum_axes(p2, &[0, 2, 3])?;
    let ysq: Vec<f64> = (0..c)
        .map(|k| y.data().chunks(y.shape()[2] * y.shape()[3]).skip(k).step_by(c).flatten().map(|v| v * v).sum())
        .collect();
    let y2 = g.constant(Tensor::new(&[1, c, 1, 1], ysq)?);
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, eps);
    let den = g.add(p2, y2)?;
    let den = g.add_scalar(den, eps);
    let ratio = g.div(num, den)?;
    let fg = g.narrow(ratio, 1, 1, c - 1)?;
    let m = g.mean(fg);
    let neg = g.neg(m);
    Ok(g.add_scalar(neg, 1.0))
}

/// `−Σ_c α_c (1−p)^γ y log p`, averaged over pixels.
pub fn focal_loss(g: &mut Graph, p: Var, y: &Tensor, class_weights: &[f64], gamma: f64) -> Result<Var> {
    check_same(g, p, y)?;
    let s = y.shape();
    if class_weights.len() != s[1] {
        return Err(Error::Shape(format!("{} focal weights for {} classes", class_weights.len(), s[1])));
    }
    let pixels = (s[0] * s[2] * s[3]) as f64;
    let mut ya = y.clone();
    let plane = s[2] * s[3];
    for (i, v) in ya.data_mut().iter_mut().enumerate() {
        *v *= class_weights[(i / plane) % s[1]];
    }
    let pc = g.clamp_min(p, FOCAL_CLAMP);
    let logp = g.ln(pc);
    let yv = g.constant(ya);
    let mut t = g.mul(yv, logp)?;
    if gamma != 0.0 {
        let q = g.neg(p);
        let q = g.add_scalar(q, 1.0);
        let q = if gamma < 1.0 { g.clamp_min(q, 1e-12) } else { q };
        let m = g.powf(q, gamma);
        t = g.mul(t, m)?;
    }
    let total = g.sum(t);
    Ok(g.scale(total, -1.0 / pixels))
}

/// `(1/N) Σ_i Σ_c w_{i,c} (p_{i,c} − y_{i,c})²` with `w = exp(−D/θ)`.
pub fn boundary_loss(g: &mut Graph, p: Var, y: &Tensor, weights: &Tensor) -> Result<Var> {
    check_same(g, p, y)?;
    if weights.shape() != y.shape() {
        return Err(Error::Shape("boundary weights differ from target shape".into()));
    }
    let s = y.shape();
    let pixels = (s[0] * s[2] * s[3]) as f64;
    let yv = g.constant(y.clone());
    let d = g.sub(p, yv)?;
    let d2 = g.square(d);
    let wv = g.constant(weights.clone());
    let t = g.mul(d2, wv)?;
    let total = g.sum(t);
    Ok(g.scale(total, 1.0 / pixels))
}

/// Expected adjacency penalty `Σ_{c,c'} A[c][c'] p_{i,c} p_{j,c'}` averaged
/// over all horizontal and vertical 4-neighbour pairs.
pub fn struct_loss(g: &mut Graph, p: Var, a: &Adjacency) -> Result<Var> {
    let s = g.shape(p).to_vec();
    if s.len() != 4 || s[1] != a.classes() {
        return Err(Error::Shape(format!("probabilities {s:?} vs {}-class adjacency", a.classes())));
    }
    let (b, h, w) = (s[0], s[2], s[3]);
    let pairs = b * (h * (w - 1) + (h - 1) * w);
    if pairs == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let k = g.constant(a.as_kernel());
    let ap = g.conv2d(p, k, None, Conv2dOpts::default())?;
    let mut terms = Vec::new();
    if w > 1 {
        let left = g.narrow(p, 3, 0, w - 1)?;
        let right = g.narrow(ap, 3, 1, w - 1)?;
        let prod = g.mul(left, right)?;
        terms.push(g.sum(prod));
    }
    if h > 1 {
        let top = g.narrow(p, 2, 0, h - 1)?;
        let bottom = g.narrow(ap, 2, 1, h - 1)?;
        let prod = g.mul(top, bottom)?;
        terms.push(g.sum(prod));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(g.scale(total, 1.0 / pairs as f64))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dice: f64,
    pub focal: f64,
    pub boundary: f64,
    #[serde(rename = "struct")]
    pub structural: f64,
    pub total: f64,
}

impl std::ops::AddAssign for LossBreakdown {
    fn add_assign(&mut self, o: Self) {
        self.dice += o.dice;
        self.focal += o.focal;
        self.boundary += o.boundary;
        self.structural += o.structural;
        self.total += o.total;
    }
}

impl LossBreakdown {
    pub fn scaled(self, k: f64) -> Self {
        Self {
            dice: self.dice * k,
            focal: self.focal * k,
            boundary: self.boundary * k,
            structural: self.structural * k,
            total: self.total * k,
        }
    }
}

/// `αL_Dice + βL_Focal + γL_Boundary + λL_Struct` on softmax probabilities.
pub fn composite_loss(g: &mut Graph, logits: Var, target: &LossTarget, cfg: &LossConfig) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    let p = g.softmax(logits, 1)?;
    let y = &target.onehot;
    let dice = dice_loss(g, p, y, cfg.dice_eps)?;
    let focal = focal_loss(g, p, y, &cfg.class_weights, cfg.focal_gamma)?;
    let boundary = boundary_loss(g, p, y, &target.boundary_weights)?;
    let structural = struct_loss(g, p, &cfg.adjacency)?;
    let mut total: Option<Var> = None;
    for (w, t) in [(cfg.alpha, dice), (cfg.beta, focal), (cfg.gamma, boundary), (cfg.lambda, structural)] {
        if w == 0.0 {
            continue;
        }
        let wt = g.scale(t, w);
        total = Some(match total {
            None => wt,
            Some(acc) => g.add(acc, wt)?,
        });
    }
    let total = match total {
        Some(t) => t,
        None => return Err(Error::Config("all loss weights are zero".into())),
    };
    let br = LossBreakdown {
        dice: g.value(dice).item(),
        focal: g.value(focal).item(),
        boundary: g.value(boundary).item(),
        structural: g.value(structural).item(),
        total: g.value(total).item(),
    };
    Ok((total, br))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::GradCheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_mask(h: usize, w: usize, classes: u8, seed: u64) -> Mask {
        let mut r = rng(seed);
        Mask::new(h, w, (0..h * w).map(|_| r.gen_range(0..classes)).collect()).unwrap()
    }

    fn random_probs(shape: &[usize], seed: u64) -> Tensor {
        let logits = Tensor::randn(shape, 1.5, &mut rng(seed));
        let mut g = Graph::no_grad();
        let v = g.constant(logits);
        let p = g.softmax(v, 1).unwrap();
        g.value(p).clone()
    }

    fn eval(f: impl FnOnce(&mut Graph) -> Var) -> f64 {
        let mut g = Graph::no_grad();
        let v = f(&mut g);
        g.value(v).item()
    }

    #[test]
    fn dice_perfect_disjoint_and_direct_sum() {
        let m = random_mask(6, 6, 4, 0);
        let y = mask::one_hot(&[m.clone()], 4).unwrap();
        let perfect = eval(|g| {
            let p = g.constant(y.clone());
            dice_loss(g, p, &y, 1e-12).unwrap()
        });
        assert!(perfect.abs() < 1e-12);

        // shift labels cyclically so no class overlaps with itself
        let shifted = Mask::new(6, 6, m.data().iter().map(|&v| (v + 1) % 4).collect()).unwrap();
        let ys = mask::one_hot(&[shifted], 4).unwrap();
        let disjoint = eval(|g| {
            let p = g.constant(ys.clone());
            dice_loss(g, p, &y, 1e-12).unwrap()
        });
        assert!((disjoint - 1.0).abs() < 1e-9);

        // uniform p over a 5×5 mask with 7 LV pixels
        let mut mm = Mask::zeros(5, 5);
        for i in 0..7 {
            mm.set(i / 5, i % 5, 3);
        }
        let y = mask::one_hot(&[mm.clone()], 4).unwrap();
        let eps = 0.5;
        let got = eval(|g| {
            let p = g.constant(Tensor::full(&[1, 4, 5, 5], 0.25));
            dice_loss(g, p, &y, eps).unwrap()
        });
        let mut acc = 0.0;
        for c in 1..4u8 {
            let (mut py, mut p2, mut y2) = (0.0, 0.0, 0.0);
            for &v in mm.data() {
                let yy = if v == c { 1.0 } else { 0.0 };
                py += 0.25 * yy;
                p2 += 0.25 * 0.25;
                y2 += yy * yy;
            }
            acc += (2.0 * py + eps) / (p2 + y2 + eps);
        }
        assert!((got - (1.0 - acc / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn focal_cases() {
        let m = random_mask(4, 5, 4, 1);
        let y = mask::one_hot(&[m.clone()], 4).unwrap();
        let p = random_probs(&[1, 4, 4, 5], 2);
        let fl = eval(|g| {
            let v = g.constant(p.clone());
            focal_loss(g, v, &y, &[1.0; 4], 0.0).unwrap()
        });
        let ce: f64 = (0..20).map(|i| -p.at(&[0, m.data()[i] as usize, i / 5, i % 5]).ln()).sum::<f64>() / 20.0;
        assert!((fl - ce).abs() < 1e-10);

        let perfect = eval(|g| {
            let v = g.constant(y.clone());
            focal_loss(g, v, &y, &[1.0; 4], 2.0).unwrap()
        });
        assert!(perfect.abs() < 1e-15);

        let y1 = Tensor::new(&[1, 2, 1, 1], vec![1.0, 0.0]).unwrap();
        let half = eval(|g| {
            let v = g.constant(Tensor::new(&[1, 2, 1, 1], vec![0.5, 0.5]).unwrap());
            focal_loss(g, v, &y1, &[1.0; 2], 2.0).unwrap()
        });
        assert!((half - 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((half - 0.17329).abs() < 1e-5);
    }

    fn brute_dt(m: &Mask, class: u8, sides: BoundarySides) -> Vec<f64> {
        let (h, w) = (m.h(), m.w());
        let is_b = |y: usize, x: usize| {
            let fg = m.get(y, x) == class;
            let diff = mask::neighbours(y, x, h, w).any(|(a, b)| (m.get(a, b) == class) != fg);
            let edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
            if fg {
                diff || edge
            } else {
                sides == BoundarySides::Both && diff
            }
        };
        let pts: Vec<(usize, usize)> = (0..h * w).map(|i| (i / w, i % w)).filter(|&(y, x)| is_b(y, x)).collect();
        (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                if pts.is_empty() {
                    return 0.0;
                }
                pts.iter()
                    .map(|&(a, b)| ((y - a as f64).powi(2) + (x - b as f64).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn distance_transform_examples_and_brute_force() {
        let mut m = Mask::zeros(9, 9);
        m.set(4, 4, 3);
        let inner = distance_transform(&m, 3, BoundarySides::Inner);
        assert_eq!(inner[4 * 9 + 4], 0.0);
        assert_eq!(inner[4 * 9 + 6], 2.0);
        let both = distance_transform(&m, 3, BoundarySides::Both);
        assert_eq!(both[4 * 9 + 5], 0.0);
        assert_eq!(both[4 * 9 + 6], 1.0);
        assert!(distance_transform(&m, 1, BoundarySides::Both).iter().all(|&d| d == 0.0));

        for seed in 0..20 {
            let mut r = rng(100 + seed);
            // blobby masks: threshold a smoothed random field
            let m = if seed % 2 == 0 {
                random_mask(16, 16, 3, seed)
            } else {
                let cx = r.gen_range(3.0..13.0);
                let cy = r.gen_range(3.0..13.0);
                let rad: f64 = r.gen_range(2.0..6.0);
                Mask::new(16, 16, (0..256).map(|i| {
                    let (y, x) = ((i / 16) as f64, (i % 16) as f64);
                    u8::from((y - cy).hypot(x - cx) < rad)
                }).collect()).unwrap()
            };
            for class in 0..3u8 {
                for sides in [BoundarySides::Inner, BoundarySides::Both] {
                    assert_eq!(distance_transform(&m, class, sides), brute_dt(&m, class, sides));
                }
            }
        }
    }

    #[test]
    fn boundary_loss_cases() {
        let m = random_mask(4, 4, 3, 3);
        let t = LossTarget::new(&[m.clone()], 3, 2.0, BoundarySides::Both).unwrap();
        let zero = eval(|g| {
            let p = g.constant(t.onehot.clone());
            boundary_loss(g, p, &t.onehot, &t.boundary_weights).unwrap()
        });
        assert_eq!(zero, 0.0);

        let p = random_probs(&[1, 3, 4, 4], 4);
        let got = eval(|g| {
            let v = g.constant(p.clone());
            boundary_loss(g, v, &t.onehot, &t.boundary_weights).unwrap()
        });
        let mut acc = 0.0;
        for c in 0..3u8 {
            let d = brute_dt(&m, c, BoundarySides::Both);
            for i in 0..16 {
                let y = if m.data()[i] == c { 1.0 } else { 0.0 };
                acc += (-d[i] / 2.0).exp() * (p.at(&[0, c as usize, i / 4, i % 4]) - y).powi(2);
            }
        }
        assert!((got - acc / 16.0).abs() < 1e-12);

        let wide = LossTarget::new(&[m.clone()], 3, 1e12, BoundarySides::Both).unwrap();
        let limit = eval(|g| {
            let v = g.constant(p.clone());
            boundary_loss(g, v, &wide.onehot, &wide.boundary_weights).unwrap()
        });
        let mse: f64 = p.data().iter().zip(wide.onehot.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 16.0;
        assert!((limit - mse).abs() < 1e-9);
    }

    #[test]
    fn struct_loss_cases() {
        let a = Adjacency::cardiac();
        a.validate().unwrap();
        // LV disc wrapped in myocardium: valid topology
        let mut m = Mask::zeros(7, 7);
        for y in 1..6 {
            for x in 1..6 {
                m.set(y, x, 2);
            }
        }
        m.set(3, 3, 3);
        let valid = mask::one_hot(&[m.clone()], 4).unwrap();
        assert_eq!(
            eval(|g| {
                let p = g.constant(valid.clone());
                struct_loss(g, p, &a).unwrap()
            }),
            0.0
        );
        // punch a hole so LV touches background at two edges
        m.set(3, 2, 0);
        m.set(2, 3, 3);
        m.set(1, 3, 0);
        let bad = mask::one_hot(&[m.clone()], 4).unwrap();
        let got = eval(|g| {
            let p = g.constant(bad.clone());
            struct_loss(g, p, &a).unwrap()
        });
        let mut viol = 0;
        let mut pairs = 0;
        for y in 0..7 {
            for x in 0..7 {
                for (ny, nx) in [(y, x + 1), (y + 1, x)] {
                    if ny < 7 && nx < 7 {
                        pairs += 1;
                        let (u, v) = (m.get(y, x), m.get(ny, nx));
                        if (u == 3 && v == 0) || (u == 0 && v == 3) {
                            viol += 1;
                        }
                    }
                }
            }
        }
        assert_eq!(viol, 2);
        assert!((got - viol as f64 / pairs as f64).abs() < 1e-15);

        let mut r = rng(5);
        let mut rows = vec![vec![0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..i {
                let v = r.gen_range(0.0..2.0);
                rows[i][j] = v;
                rows[j][i] = v;
            }
        }
        let ra = Adjacency(rows.clone());
        let uniform = eval(|g| {
            let p = g.constant(Tensor::full(&[2, 4, 3, 5], 0.25));
            struct_loss(g, p, &ra).unwrap()
        });
        let sum: f64 = rows.iter().flatten().sum();
        assert!((uniform - sum / 16.0).abs() < 1e-14);
    }

    #[test]
    fn adjacency_validation_and_file_round_trip() {
        assert!(Adjacency(vec![vec![0.0, 1.0], vec![0.0, 0.0]]).validate().is_err());
        assert!(Adjacency(vec![vec![1.0, 0.0], vec![0.0, 0.0]]).validate().is_err());
        assert!(Adjacency(vec![vec![0.0, -1.0], vec![-1.0, 0.0]]).validate().is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adj.json");
        Adjacency::cardiac().save(&path).unwrap();
        assert_eq!(Adjacency::load(&path).unwrap(), Adjacency::cardiac());
        let text = std::fs::read_to_string(&path).unwrap();
        let raw: Vec<Vec<f64>> = serde_json::from_str(&text).unwrap();
        assert_eq!(raw[3][0], 1.0);
    }

    fn fixture(seed: u64) -> (Tensor, LossTarget) {
        let masks = [random_mask(5, 6, 4, seed), random_mask(5, 6, 4, seed + 1)];
        let t = LossTarget::new(&masks, 4, 5.0, BoundarySides::Both).unwrap();
        (Tensor::randn(&[2, 4, 5, 6], 1.0, &mut rng(seed + 2)), t)
    }

    #[test]
    fn composite_recomposes_and_selects() {
        let (logits, t) = fixture(10);
        let cfg = LossConfig::default();
        let mut g = Graph::no_grad();
        let l = g.constant(logits.clone());
        let (total, br) = composite_loss(&mut g, l, &t, &cfg).unwrap();
        let p = g.softmax(l, 1).unwrap();
        let d = dice_loss(&mut g, p, &t.onehot, cfg.dice_eps).unwrap();
        let f = focal_loss(&mut g, p, &t.onehot, &cfg.class_weights, 2.0).unwrap();
        let b = boundary_loss(&mut g, p, &t.onehot, &t.boundary_weights).unwrap();
        let s = struct_loss(&mut g, p, &cfg.adjacency).unwrap();
        let [d, f, b, s] = [d, f, b, s].map(|v| g.value(v).item());
        let want = 0.5 * d + 0.3 * f + 0.2 * b + 0.1 * s;
        assert!((g.value(total).item() - want).abs() < 1e-12);
        assert_eq!((br.dice, br.focal, br.boundary, br.structural), (d, f, b, s));

        let only = LossConfig { alpha: 1.0, beta: 0.0, gamma: 0.0, lambda: 0.0, ..cfg.clone() };
        let (tv, _) = composite_loss(&mut g, l, &t, &only).unwrap();
        assert_eq!(g.value(tv).item(), d);

        let neg = LossConfig { beta: -0.1, ..cfg.clone() };
        assert!(composite_loss(&mut g, l, &t, &neg).is_err());
    }

    #[test]
    fn correct_hard_prediction_is_near_zero() {
        let m = random_mask(6, 6, 4, 20);
        let t = LossTarget::new(&[m], 4, 5.0, BoundarySides::Both).unwrap();
        // large logits on the true class
        let logits = Tensor::new(t.onehot.shape(), t.onehot.data().iter().map(|v| v * 40.0).collect()).unwrap();
        let mut g = Graph::no_grad();
        let l = g.constant(logits);
        let cfg = LossConfig { dice_eps: 1e-9, lambda: 0.0, ..Default::default() };
        let (_, br) = composite_loss(&mut g, l, &t, &cfg).unwrap();
        assert!(br.total < 1e-9, "{br:?}");
    }

    #[test]
    fn presets_have_table_order() {
        let names: Vec<&str> = loss_presets().iter().map(|p| p.0).collect();
        assert_eq!(
            names,
            ["L_Dice Only", "L_Boundary Only", "L_Focal Only", "L_Dice + L_Focal", "L_Dice + L_Boundary", "L_Hybrid"]
        );
        for (_, c) in loss_presets() {
            c.validate().unwrap();
        }
        assert_eq!(dice_ce().focal_gamma, 0.0);
    }

    #[test]
    fn gradcheck_each_term_and_composite() {
        let (logits, t) = fixture(30);
        let cfg = LossConfig::default();
        let gc = GradCheck::default();
        let inputs = [("logits", logits)];
        let checks: Vec<(&str, Box<dyn Fn(&mut Graph, Var) -> Result<Var>>)> = vec![
            ("dice", Box::new(|g, p| dice_loss(g, p, &t.onehot, 1.0))),
            ("focal", Box::new(|g, p| focal_loss(g, p, &t.onehot, &[1.0, 2.0, 0.5, 1.0], 2.0))),
            ("boundary", Box::new(|g, p| boundary_loss(g, p, &t.onehot, &t.boundary_weights))),
            ("struct", Box::new(|g, p| struct_loss(g, p, &cfg.adjacency))),
        ];
        for (name, f) in &checks {
            let rep = gc
                .run(name, &inputs, |g, v| {
                    let p = g.softmax(v[0], 1)?;
                    f(g, p)
                })
                .unwrap();
            assert!(rep.passes(1e-4), "{rep:?}");
        }
        let rep = gc.run("composite", &inputs, |g, v| Ok(composite_loss(g, v[0], &t, &cfg)?.0)).unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");
    }
}
