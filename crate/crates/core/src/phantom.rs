//! Synthetic short-axis phantoms with nested ground truth.
//!
//! Each slice has an elliptical LV cavity, a myocardial ring of constant
//! thickness around it (grown with the exact distance transform, so the
//! cavity is always enclosed) and an RV crescent hugging the free wall.
//! ES slices reuse the ED geometry with every length scaled by the systolic
//! factor.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{self, Mask};
use crate::tensor::{DType, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    ED,
    ES,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::ED => "ED",
            Phase::ES => "ES",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ED" => Ok(Phase::ED),
            "ES" => Ok(Phase::ES),
            _ => Err(Error::Format(format!("unknown phase `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub size: usize,
    /// Mean intensity per class, BG/RV/Myo/LV.
    pub intensity_mean: [f64; 4],
    /// Per-pixel texture stddev per class.
    pub intensity_std: [f64; 4],
    pub lv_radius: (f64, f64),
    /// Max relative difference between the cavity semi-axes.
    pub eccentricity: f64,
    pub myo_thickness: (f64, f64),
    /// How far the RV reaches past the myocardium on the free wall.
    pub rv_width: (f64, f64),
    /// Max offset of the heart centre from the image centre.
    pub center_jitter: f64,
    pub noise_std: f64,
    pub systolic_factor: f64,
    pub slices: usize,
    /// Scale of the most apical slice; slices interpolate from 1 to this.
    pub apical_scale: f64,
    pub margin: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            size: 64,
            intensity_mean: [0.12, 0.78, 0.38, 0.88],
            intensity_std: [0.04, 0.05, 0.04, 0.05],
            lv_radius: (8.0, 11.0),
            eccentricity: 0.15,
            myo_thickness: (4.0, 6.0),
            rv_width: (5.0, 8.0),
            center_jitter: 2.0,
            noise_std: 0.05,
            systolic_factor: 0.85,
            slices: 2,
            apical_scale: 0.85,
            margin: 2,
        }
    }
}

impl PhantomConfig {
    fn min_scale(&self) -> f64 {
        let apex = if self.slices > 1 { self.apical_scale } else { 1.0 };
        apex * self.systolic_factor.min(1.0)
    }

    /// Largest distance from the image centre any structure can reach.
    pub fn max_extent(&self) -> f64 {
        let scale = self.systolic_factor.max(1.0) * self.apical_scale.max(1.0);
        self.center_jitter
            + scale * (self.lv_radius.1 * (1.0 + self.eccentricity) + self.myo_thickness.1 + self.rv_width.1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let range_ok = |r: (f64, f64)| r.0 > 0.0 && r.0 <= r.1 && r.1.is_finite();
        if self.size < 16 {
            return bad(format!("phantom size {} too small", self.size));
        }
        for (name, r) in [("lv_radius", self.lv_radius), ("myo_thickness", self.myo_thickness), ("rv_width", self.rv_width)] {
            if !range_ok(r) {
                return bad(format!("{name} range {r:?} invalid"));
            }
        }
        if self.slices == 0 {
            return bad("need at least one slice".into());
        }
        if !(self.systolic_factor > 0.0 && self.apical_scale > 0.0 && self.apical_scale <= 1.0) {
            return bad("systolic factor and apical scale must be positive, apical scale ≤ 1".into());
        }
        if !(0.0..0.5).contains(&self.eccentricity) || self.noise_std < 0.0 || self.center_jitter < 0.0 {
            return bad("eccentricity in [0,0.5), noise and jitter ≥ 0".into());
        }
        if self.intensity_std.iter().any(|&s| s < 0.0) {
            return bad("negative intensity stddev".into());
        }
        if self.myo_thickness.0 * self.min_scale() < 2.0 {
            return bad(format!(
                "myocardium thins to {:.2} px at the smallest scale; need ≥ 2",
                self.myo_thickness.0 * self.min_scale()
            ));
        }
        let room = self.size as f64 / 2.0 - self.margin as f64 - 1.0;
        if self.max_extent() > room {
            return bad(format!("structures reach {:.1} px from centre but only {room:.1} px fit", self.max_extent()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    /// `[1,H,W]`, zero mean and unit variance.
    pub image: Tensor,
    pub mask: Mask,
    pub patient_id: String,
    pub phase: Phase,
    pub slice: usize,
}

impl SegSample {
    pub fn case_id(&self) -> String {
        format!("{}_{}_{}", self.patient_id, self.phase, self.slice)
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    tilt: f64,
    thickness: f64,
    rv_dir: f64,
    rv_width: f64,
}

impl Geometry {
    fn scaled(&self, s: f64) -> Self {
        Self { a: self.a * s, b: self.b * s, thickness: self.thickness * s, rv_width: self.rv_width * s, ..*self }
    }

    fn rasterize(&self, size: usize) -> Mask {
        let n = size * size;
        let (sin, cos) = self.tilt.sin_cos();
        let cavity: Vec<bool> = (0..n)
            .map(|i| {
                let (dy, dx) = ((i / size) as f64 - self.cy, (i % size) as f64 - self.cx);
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
            })
            .collect();
        let mut m = Mask::zeros(size, size);
        let Some(d) = mask::edt(&cavity, size, size) else {
            return m;
        };
        let r_out = self.a.max(self.b) + self.thickness;
        let (ry, rx) = (self.cy + 0.5 * r_out * self.rv_dir.sin(), self.cx + 0.5 * r_out * self.rv_dir.cos());
        let r_rv = 0.5 * r_out + self.rv_width;
        for i in 0..n {
            let (y, x) = (i / size, i % size);
            let label = if cavity[i] {
                mask::LV
            } else if d[i] <= self.thickness {
                mask::MYO
            } else if ((y as f64 - ry).powi(2) + (x as f64 - rx).powi(2)).sqrt() <= r_rv {
                mask::RV
            } else {
                mask::BG
            };
            m.set(y, x, label);
        }
        m
    }
}

/// Independent per-patient stream derived from a run seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index + 1);
    r.gen()
}

pub fn patient_id(index: usize) -> String {
    format!("patient{:03}", index + 1)
}

/// Zero-mean, unit-variance copy (population statistics).
/// A `[1,H,W]` z-scored image from a `.tns` (`[H,W]` or `[1,H,W]`) or a
/// grayscale PNG.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let (h, w, mut data) = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        let img = image::open(path)?.into_luma8();
        let (w, h) = img.dimensions();
        (h as usize, w as usize, img.pixels().map(|p| p.0[0] as f64 / 255.0).collect::<Vec<_>>())
    } else {
        let t = Tensor::read_tns(path)?;
        match *t.shape() {
            [h, w] | [1, h, w] => (h, w, t.into_data()),
            _ => return Err(Error::Shape(format!("{}: expected [H,W] or [1,H,W], got {:?}", path.display(), t.shape()))),
        }
    };
    zscore(&mut data);
    Tensor::new(&[1, h, w], data)
}

pub fn zscore(data: &mut [f64]) {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-12);
    data.iter_mut().for_each(|v| *v = (*v - mean) / sd);
}

/// ED slices followed by ES slices, apex last within each phase.
pub fn generate_patient(id: &str, seed: u64, cfg: &PhantomConfig) -> Result<Vec<SegSample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = |r: (f64, f64), rng: &mut ChaCha8Rng| if r.0 == r.1 { r.0 } else { rng.gen_range(r.0..=r.1) };
    let c = (cfg.size as f64 - 1.0) / 2.0;
    let radius = span(cfg.lv_radius, &mut rng);
    let ecc = if cfg.eccentricity > 0.0 { rng.gen_range(-cfg.eccentricity..=cfg.eccentricity) } else { 0.0 };
    let jitter = |rng: &mut ChaCha8Rng| if cfg.center_jitter > 0.0 { rng.gen_range(-cfg.center_jitter..=cfg.center_jitter) } else { 0.0 };
    let base = Geometry {
        cy: c + jitter(&mut rng),
        cx: c + jitter(&mut rng),
        a: radius * (1.0 + ecc),
        b: radius * (1.0 - ecc),
        tilt: rng.gen_range(0.0..std::f64::consts::PI),
        thickness: span(cfg.myo_thickness, &mut rng),
        // free wall towards the image left, with some spread
        rv_dir: std::f64::consts::PI + rng.gen_range(-0.5..=0.5),
        rv_width: span(cfg.rv_width, &mut rng),
    };

    let mut out = Vec::with_capacity(2 * cfg.slices);
    for phase in [Phase::ED, Phase::ES] {
        let phase_scale = if phase == Phase::ED { 1.0 } else { cfg.systolic_factor };
        for s in 0..cfg.slices {
            let t = if cfg.slices > 1 { s as f64 / (cfg.slices - 1) as f64 } else { 0.0 };
            let slice_scale = 1.0 + t * (cfg.apical_scale - 1.0);
            let m = base.scaled(phase_scale * slice_scale).rasterize(cfg.size);
            let mut img: Vec<f64> = m
                .data()
                .iter()
                .map(|&l| {
                    let l = l as usize;
                    let z: f64 = StandardNormal.sample(&mut rng);
                    cfg.intensity_mean[l] + cfg.intensity_std[l] * z
                })
                .collect();
            if cfg.noise_std > 0.0 {
                let noise = Normal::new(0.0, cfg.noise_std).expect("validated stddev");
                img.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
            }
            zscore(&mut img);
            out.push(SegSample {
                image: Tensor::new(&[1, cfg.size, cfg.size], img)?,
                mask: m,
                patient_id: id.to_string(),
                phase,
                slice: s,
            });
        }
    }
    Ok(out)
}

/// Patients `0..n`, generated on up to `threads` workers.
pub fn generate_cohort(n: usize, seed: u64, cfg: &PhantomConfig, threads: usize) -> Result<Vec<Vec<SegSample>>> {
    cfg.validate()?;
    let threads = threads.clamp(1, n.max(1));
    let mut slots: Vec<Option<Result<Vec<SegSample>>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        for (t, chunk) in slots.chunks_mut(n.div_ceil(threads).max(1)).enumerate() {
            let base = t * n.div_ceil(threads).max(1);
            scope.spawn(move || {
                for (j, slot) in chunk.iter_mut().enumerate() {
                    let i = base + j;
                    *slot = Some(generate_patient(&patient_id(i), derive_seed(seed, i as u64), cfg));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub max_rotation_deg: f64,
    pub scale: (f64, f64),
    /// Peak elastic displacement in pixels.
    pub elastic_alpha: f64,
    /// Smoothing radius of the displacement field in pixels.
    pub elastic_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { max_rotation_deg: 15.0, scale: (0.9, 1.1), elastic_alpha: 1.5, elastic_sigma: 4.0 }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self { max_rotation_deg: 0.0, scale: (1.0, 1.0), elastic_alpha: 0.0, elastic_sigma: 4.0 }
    }
}

/// A concrete geometric transform. Output pixel `p` samples the input at
/// `c + R(-θ)(p − c)/s + d(p)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Warp {
    pub angle_rad: f64,
    pub scale: f64,
    /// Per-pixel displacement `(dy, dx)`, empty for none.
    pub displacement: Vec<(f64, f64)>,
}

impl Warp {
    pub fn rotation(deg: f64) -> Self {
        Self { angle_rad: deg.to_radians(), scale: 1.0, displacement: Vec::new() }
    }

    pub fn is_identity(&self) -> bool {
        self.angle_rad == 0.0 && self.scale == 1.0 && self.displacement.iter().all(|&(a, b)| a == 0.0 && b == 0.0)
    }

    pub fn sample(cfg: &AugmentConfig, h: usize, w: usize, rng: &mut impl Rng) -> Self {
        let angle_rad = if cfg.max_rotation_deg > 0.0 {
            rng.gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg).to_radians()
        } else {
            0.0
        };
        let scale = if cfg.scale.0 < cfg.scale.1 { rng.gen_range(cfg.scale.0..=cfg.scale.1) } else { cfg.scale.0 };
        let displacement = if cfg.elastic_alpha > 0.0 {
            let dy = smooth_field(h, w, cfg.elastic_sigma, rng);
            let dx = smooth_field(h, w, cfg.elastic_sigma, rng);
            dy.into_iter().zip(dx).map(|(a, b)| (a * cfg.elastic_alpha, b * cfg.elastic_alpha)).collect()
        } else {
            Vec::new()
        };
        Self { angle_rad, scale, displacement }
    }

    fn source(&self, y: usize, x: usize, h: usize, w: usize) -> (f64, f64) {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        let (sin, cos) = self.angle_rad.sin_cos();
        let mut sy = cy + (cos * dy - sin * dx) / self.scale;
        let mut sx = cx + (sin * dy + cos * dx) / self.scale;
        if let Some(&(ey, ex)) = self.displacement.get(y * w + x) {
            sy += ey;
            sx += ex;
        }
        (sy, sx)
    }

    /// Bilinear on the image (edge-clamped), nearest on the mask (outside → BG).
    pub fn apply(&self, s: &SegSample) -> SegSample {
        if self.is_identity() {
            return s.clone();
        }
        let (h, w) = (s.mask.h(), s.mask.w());
        let src = s.image.data();
        let mut img = vec![0.0; h * w];
        let mut m = Mask::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = self.source(y, x, h, w);
                let (fy, fx) = (sy.clamp(0.0, (h - 1) as f64), sx.clamp(0.0, (w - 1) as f64));
                let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
                let at = |yy: usize, xx: usize| src[yy * w + xx];
                img[y * w + x] = (1.0 - ty) * ((1.0 - tx) * at(y0, x0) + tx * at(y0, x1))
                    + ty * ((1.0 - tx) * at(y1, x0) + tx * at(y1, x1));
                let (ny, nx) = (sy.round(), sx.round());
                if ny >= 0.0 && nx >= 0.0 && (ny as usize) < h && (nx as usize) < w {
                    m.set(y, x, s.mask.get(ny as usize, nx as usize));
                }
            }
        }
        SegSample {
            image: Tensor::new(&[1, h, w], img).expect("same shape"),
            mask: m,
            patient_id: s.patient_id.clone(),
            phase: s.phase,
            slice: s.slice,
        }
    }
}

// White noise blurred by a separable Gaussian, rescaled to unit peak.
fn smooth_field(h: usize, w: usize, sigma: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut f: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let blur = |f: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (j, &kv) in k.iter().enumerate() {
                    let o = j as isize - r;
                    let (yy, xx) = if horizontal { (y as isize, x as isize + o) } else { (y as isize + o, x as isize) };
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        acc += kv * f[yy as usize * w + xx as usize];
                        norm += kv;
                    }
                }
                out[y * w + x] = acc / norm;
            }
        }
        out
    };
    f = blur(&blur(&f, true), false);
    let peak = f.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    f.iter_mut().for_each(|v| *v /= peak);
    f
}

pub fn augment(s: &SegSample, cfg: &AugmentConfig, rng: &mut impl Rng) -> SegSample {
    Warp::sample(cfg, s.mask.h(), s.mask.w(), rng).apply(s)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    pub fn get(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            _ => Err(Error::Config(format!("unknown split `{name}`; expected train, val or test"))),
        }
    }
}

/// Patient-level shuffle split. Sizes round to nearest; test takes the rest.
pub fn split_patients(ids: &[String], fractions: (f64, f64, f64), seed: u64) -> Result<Split> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|&f| !(0.0..=1.0).contains(&f)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let n = ids.len();
    let n_train = (a * n as f64).round() as usize;
    let n_val = ((b * n as f64).round() as usize).min(n - n_train.min(n));
    if n_train > n || [(a, n_train), (b, n_val), (c, n - n_train - n_val)].iter().any(|&(f, k)| f > 0.0 && k == 0) {
        return Err(Error::Config(format!("{n} patients are too few for split {fractions:?}")));
    }
    let mut ids = ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = ids.split_off(n_train + n_val);
    let val = ids.split_off(n_train);
    Ok(Split { train: ids, val, test })
}

/// `(train, val)` id lists for each of `k` folds over shuffled patients.
pub fn k_fold(ids: &[String], k: usize, seed: u64) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k ≥ 2, got {k}")));
    }
    if k > ids.len() {
        return Err(Error::Config(format!("k = {k} exceeds {} patients", ids.len())));
    }
    let mut ids = ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((0..k)
        .map(|f| {
            let (mut train, mut val) = (Vec::new(), Vec::new());
            for (i, id) in ids.iter().enumerate() {
                if i % k == f { val.push(id.clone()) } else { train.push(id.clone()) }
            }
            (train, val)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub patients: Vec<String>,
    pub config: PhantomConfig,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<SegSample>,
}

impl Dataset {
    pub fn generate(n: usize, seed: u64, cfg: &PhantomConfig, threads: usize) -> Result<Self> {
        let cohort = generate_cohort(n, seed, cfg, threads)?;
        Ok(Self {
            meta: DatasetMeta { patients: (0..n).map(patient_id).collect(), config: cfg.clone(), seed },
            samples: cohort.into_iter().flatten().collect(),
        })
    }

    pub fn of_patients<'a>(&'a self, ids: &'a [String]) -> impl Iterator<Item = &'a SegSample> + 'a {
        self.samples.iter().filter(move |s| ids.contains(&s.patient_id))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&self.meta)?)?;
        for s in &self.samples {
            let pdir = dir.join(&s.patient_id);
            fs::create_dir_all(&pdir)?;
            let stem = format!("{}_{}", s.phase, s.slice);
            s.image.write_tns(&pdir.join(format!("{stem}.tns")), DType::F64)?;
            s.mask.to_tensor().write_tns(&pdir.join(format!("{stem}_mask.tns")), DType::F32)?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
        let mut samples = Vec::new();
        for pid in &meta.patients {
            for phase in [Phase::ED, Phase::ES] {
                for slice in 0..meta.config.slices {
                    let stem = dir.join(pid).join(format!("{phase}_{slice}"));
                    let image = Tensor::read_tns(&stem.with_extension("tns"))?;
                    let mask = Mask::from_tensor(&Tensor::read_tns(&dir.join(pid).join(format!("{phase}_{slice}_mask.tns")))?)?;
                    if image.shape() != [1, mask.h(), mask.w()] {
                        return Err(Error::Format(format!("{} image/mask sizes disagree", stem.display())));
                    }
                    samples.push(SegSample { image, mask, patient_id: pid.clone(), phase, slice });
                }
            }
        }
        Ok(Self { meta, samples })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cohort(n: usize) -> Vec<Vec<SegSample>> {
        generate_cohort(n, 11, &PhantomConfig::default(), 3).unwrap()
    }

    #[test]
    fn deterministic_and_thread_independent() {
        let a = generate_patient("p", 5, &PhantomConfig::default()).unwrap();
        let b = generate_patient("p", 5, &PhantomConfig::default()).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.image.bit_eq(&y.image) && x.mask == y.mask));
        let one = generate_cohort(5, 11, &PhantomConfig::default(), 1).unwrap();
        let many = cohort(5);
        for (p, q) in one.iter().flatten().zip(many.iter().flatten()) {
            assert!(p.image.bit_eq(&q.image));
        }
    }

    #[test]
    fn nesting_and_labels() {
        for p in cohort(12) {
            assert_eq!(p.len(), 4);
            for s in &p {
                assert!(s.mask.lv_enclosed(), "{}", s.case_id());
                assert!(s.mask.max_label() <= 3);
                for c in 1..4 {
                    assert!(s.mask.count(c) > 0);
                }
                // RV never touches the cavity
                for y in 0..64 {
                    for x in 0..64 {
                        if s.mask.get(y, x) == mask::LV {
                            assert!(mask::neighbours(y, x, 64, 64).all(|(a, b)| s.mask.get(a, b) != mask::RV));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn systole_shrinks_cavity() {
        for p in cohort(6) {
            for slice in 0..2 {
                let ed = p.iter().find(|s| s.phase == Phase::ED && s.slice == slice).unwrap();
                let es = p.iter().find(|s| s.phase == Phase::ES && s.slice == slice).unwrap();
                assert!(es.mask.count(mask::LV) < ed.mask.count(mask::LV));
            }
        }
    }

    #[test]
    fn zscore_per_slice_and_patient() {
        for p in cohort(3) {
            let mut all = Vec::new();
            for s in &p {
                let d = s.image.data();
                let n = d.len() as f64;
                let m = d.iter().sum::<f64>() / n;
                let sd = (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
                assert!(m.abs() < 1e-6 && (sd - 1.0).abs() < 1e-6);
                all.extend_from_slice(d);
            }
            let n = all.len() as f64;
            let m = all.iter().sum::<f64>() / n;
            let sd = (all.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            assert!(m.abs() < 1e-6 && (sd - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn infeasible_configs_rejected() {
        let big = PhantomConfig { lv_radius: (20.0, 25.0), ..Default::default() };
        assert!(matches!(generate_patient("p", 0, &big), Err(Error::Config(_))));
        let thin = PhantomConfig { myo_thickness: (2.0, 3.0), ..Default::default() };
        assert!(thin.validate().is_err());
        let structures_fit = PhantomConfig::default();
        for p in cohort(8) {
            for s in p {
                let m = structures_fit.margin;
                for y in 0..64 {
                    for x in 0..64 {
                        if y < m || x < m || y >= 64 - m || x >= 64 - m {
                            assert_eq!(s.mask.get(y, x), mask::BG);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn zero_augmentation_is_identity() {
        let s = &cohort(1)[0][0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment(s, &AugmentConfig::none(), &mut rng);
        assert!(out.image.bit_eq(&s.image));
        assert_eq!(out.mask, s.mask);
        let w = Warp { angle_rad: 0.0, scale: 1.0, displacement: vec![(0.0, 0.0); 64 * 64] };
        assert_eq!(w.apply(s).mask, s.mask);
    }

    #[test]
    fn rotation_round_trip_band() {
        for p in cohort(4) {
            let s = &p[0];
            for deg in [7.0, -15.0, 12.5] {
                let back = Warp::rotation(-deg).apply(&Warp::rotation(deg).apply(s));
                let diff: Vec<bool> = (0..64 * 64).map(|i| back.mask.data()[i] != s.mask.data()[i]).collect();
                // every changed pixel sits within 2 px of a label boundary
                let mut edges = vec![false; 64 * 64];
                for y in 0..64 {
                    for x in 0..64 {
                        let l = s.mask.get(y, x);
                        edges[y * 64 + x] = mask::neighbours(y, x, 64, 64).any(|(a, b)| s.mask.get(a, b) != l);
                    }
                }
                let d = mask::edt(&edges, 64, 64).unwrap();
                for i in 0..64 * 64 {
                    if diff[i] {
                        assert!(d[i] <= 2.0, "pixel {i} off by {}", d[i]);
                    }
                }
            }
        }
    }

    #[test]
    fn augmentation_keeps_labels_and_varies() {
        let s = &cohort(1)[0][0];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let outs: Vec<SegSample> = (0..5).map(|_| augment(s, &AugmentConfig::default(), &mut rng)).collect();
        for o in &outs {
            assert!(o.mask.max_label() <= 3);
            assert!(o.image.is_finite());
        }
        assert!(outs.iter().any(|o| o.mask != s.mask));
    }

    #[test]
    fn splits() {
        let ids: Vec<String> = (0..10).map(patient_id).collect();
        let sp = split_patients(&ids, (0.8, 0.1, 0.1), 1).unwrap();
        assert_eq!((sp.train.len(), sp.val.len(), sp.test.len()), (8, 1, 1));
        let mut all: Vec<&String> = sp.train.iter().chain(&sp.val).chain(&sp.test).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 10);
        assert_eq!(sp, split_patients(&ids, (0.8, 0.1, 0.1), 1).unwrap());
        assert!(split_patients(&ids[..3], (0.8, 0.1, 0.1), 1).is_err());
        assert!(split_patients(&ids, (0.8, 0.1, 0.2), 1).is_err());

        let folds = k_fold(&ids, 5, 2).unwrap();
        let mut seen: Vec<String> = folds.iter().flat_map(|(_, v)| v.clone()).collect();
        seen.sort();
        assert_eq!(seen, ids);
        for (t, v) in &folds {
            assert!(t.iter().all(|x| !v.contains(x)));
            assert_eq!(t.len() + v.len(), 10);
        }
        assert!(k_fold(&ids, 1, 0).is_err());
        assert!(k_fold(&ids, 11, 0).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::generate(2, 4, &PhantomConfig::default(), 2).unwrap();
        ds.write(dir.path()).unwrap();
        assert!(dir.path().join("patient001/ED_0.tns").exists());
        assert!(dir.path().join("patient002/ES_1_mask.tns").exists());
        let back = Dataset::read(dir.path()).unwrap();
        assert_eq!(back.meta, ds.meta);
        for (a, b) in back.samples.iter().zip(&ds.samples) {
            assert!(a.image.bit_eq(&b.image));
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.case_id(), b.case_id());
        }
    }
}
