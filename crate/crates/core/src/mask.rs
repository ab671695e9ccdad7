//! Integer label masks, 4-connected boundaries and the exact Euclidean
//! distance transform shared by the boundary loss and HD95.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BG: u8 = 0;
pub const RV: u8 = 1;
pub const MYO: u8 = 2;
pub const LV: u8 = 3;
pub const CLASS_NAMES: [&str; 4] = ["BG", "RV", "Myo", "LV"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if h == 0 || w == 0 || data.len() != h * w {
            return Err(Error::Shape(format!("mask {h}×{w} with {} labels", data.len())));
        }
        Ok(Self { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![0; h * w] }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.w + x] = v;
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }

    pub fn binary(&self, class: u8) -> Vec<bool> {
        self.data.iter().map(|&v| v == class).collect()
    }

    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Mask from a `[H,W]` or `[1,H,W]` tensor of class indices.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        let (h, w) = match s {
            [h, w] | [1, h, w] => (*h, *w),
            _ => return Err(Error::Shape(format!("mask tensor must be [H,W], got {s:?}"))),
        };
        let data = t
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v <= 255.0 && v.fract() == 0.0 {
                    Ok(v as u8)
                } else {
                    Err(Error::Format(format!("mask value {v} is not a class index")))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        Mask::new(h, w, data)
    }

    /// Colour PNG with one fixed colour per label.
    pub fn write_png(&self, path: &std::path::Path) -> Result<()> {
        const PALETTE: [[u8; 3]; 5] = [[0, 0, 0], [66, 135, 245], [245, 191, 66], [230, 57, 70], [255, 255, 255]];
        let mut img = image::RgbImage::new(self.w as u32, self.h as u32);
        for (i, &v) in self.data.iter().enumerate() {
            let c = PALETTE[(v as usize).min(PALETTE.len() - 1)];
            img.put_pixel((i % self.w) as u32, (i / self.w) as u32, image::Rgb(c));
        }
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.h, self.w], self.data.iter().map(|&v| v as f64).collect()).expect("valid shape")
    }

    /// True when no LV pixel is 4-adjacent to background.
    pub fn lv_enclosed(&self) -> bool {
        for y in 0..self.h {
            for x in 0..self.w {
                if self.get(y, x) != LV {
                    continue;
                }
                let touches_bg = neighbours(y, x, self.h, self.w).any(|(ny, nx)| self.get(ny, nx) == BG);
                let on_edge = y == 0 || x == 0 || y + 1 == self.h || x + 1 == self.w;
                if touches_bg || on_edge {
                    return false;
                }
            }
        }
        true
    }
}

/// In-image 4-neighbours of `(y, x)`.
pub fn neighbours(y: usize, x: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let cand = [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)];
    cand.into_iter().filter(move |&(a, b)| a < h && b < w)
}

/// `[B,C,H,W]` one-hot encoding.
pub fn one_hot(masks: &[Mask], classes: usize) -> Result<Tensor> {
    let first = masks.first().ok_or_else(|| Error::Shape("no masks".into()))?;
    let (h, w) = (first.h, first.w);
    let mut t = Tensor::zeros(&[masks.len(), classes, h, w]);
    let plane = h * w;
    for (b, m) in masks.iter().enumerate() {
        if (m.h, m.w) != (h, w) {
            return Err(Error::Shape("masks differ in size".into()));
        }
        for (i, &v) in m.data.iter().enumerate() {
            if v as usize >= classes {
                return Err(Error::Shape(format!("label {v} out of range for {classes} classes")));
            }
            t.data_mut()[(b * classes + v as usize) * plane + i] = 1.0;
        }
    }
    Ok(t)
}

/// Foreground pixels removed by a 4-connected erosion; pixels outside the
/// image count as background.
pub fn inner_boundary(bin: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !bin[y * w + x] {
                continue;
            }
            let edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
            out[y * w + x] = edge || neighbours(y, x, h, w).any(|(a, b)| !bin[a * w + b]);
        }
    }
    out
}

/// Background pixels with a 4-neighbour in the foreground.
pub fn outer_boundary(bin: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !bin[y * w + x] {
                out[y * w + x] = neighbours(y, x, h, w).any(|(a, b)| bin[a * w + b]);
            }
        }
    }
    out
}

// Lower envelope of parabolas; exact on integer-valued inputs. Infinite
// entries are not seeds and never enter the envelope.
fn edt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let Some(first) = f.iter().position(|x| x.is_finite()) else {
        d.iter_mut().for_each(|x| *x = f64::INFINITY);
        return;
    };
    let mut k = 0usize;
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, dq) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dx = q as f64 - v[k] as f64;
        *dq = dx * dx + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest seed, or
/// `None` if there are no seeds.
pub fn edt_squared(seeds: &[bool], h: usize, w: usize) -> Option<Vec<f64>> {
    if !seeds.iter().any(|&s| s) {
        return None;
    }
    let n = h.max(w);
    let (mut f, mut d, mut v, mut z) = (vec![0.0; n], vec![0.0; n], vec![0usize; n], vec![0.0; n + 1]);
    let mut grid: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut d[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = d[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut d[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&d[..w]);
    }
    Some(grid)
}

pub fn edt(seeds: &[bool], h: usize, w: usize) -> Option<Vec<f64>> {
    edt_squared(seeds, h, w).map(|g| g.into_iter().map(f64::sqrt).collect())
}
