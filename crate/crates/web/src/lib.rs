//! wasm-bindgen exports for `www/index.html`.

use wasm_bindgen::prelude::*;

use cardioseg::autodiff::Graph;
use cardioseg::decoder::sobel_gradients;
use cardioseg::mask::{Mask, CLASS_NAMES};
use cardioseg::metrics::CaseMetrics;
use cardioseg::phantom::{self, PhantomConfig, Phase, SegSample, Warp};

const PALETTE: [[u8; 3]; 4] = [[0, 0, 0], [66, 135, 245], [245, 191, 66], [230, 57, 70]];

fn slice(seed: u32, es: bool) -> Result<SegSample, JsError> {
    let cfg = PhantomConfig { slices: 1, ..Default::default() };
    let id = phantom::patient_id(seed as usize);
    let samples = phantom::generate_patient(&id, seed as u64, &cfg).map_err(|e| JsError::new(&e.to_string()))?;
    let phase = if es { Phase::ES } else { Phase::ED };
    samples.into_iter().find(|s| s.phase == phase).ok_or_else(|| JsError::new("phase missing"))
}

fn gray(v: &[f64]) -> Vec<u8> {
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let span = (hi - lo).max(1e-12);
    v.iter().map(|&x| (255.0 * (x - lo) / span).round() as u8).collect()
}

fn rgba(g: &[u8], mask: Option<&Mask>) -> Vec<u8> {
    let mut out = Vec::with_capacity(g.len() * 4);
    for (i, &v) in g.iter().enumerate() {
        let mut px = [v, v, v];
        if let Some(m) = mask {
            let l = m.data()[i] as usize;
            if l > 0 {
                for (p, c) in px.iter_mut().zip(PALETTE[l]) {
                    *p = ((*p as u16 + c as u16) / 2) as u8;
                }
            }
        }
        out.extend_from_slice(&px);
        out.push(255);
    }
    out
}

#[wasm_bindgen]
pub fn image_size() -> u32 {
    PhantomConfig::default().size as u32
}

/// RGBA pixels of one phantom slice, optionally with its labels overlaid.
#[wasm_bindgen]
pub fn phantom_rgba(seed: u32, es: bool, overlay: bool) -> Result<Vec<u8>, JsError> {
    let s = slice(seed, es)?;
    Ok(rgba(&gray(s.image.data()), overlay.then_some(&s.mask)))
}

/// RGBA Sobel gradient magnitude of the slice.
#[wasm_bindgen]
pub fn sobel_rgba(seed: u32, es: bool) -> Result<Vec<u8>, JsError> {
    let s = slice(seed, es)?;
    let n = s.image.shape()[1];
    let mut g = Graph::no_grad();
    let x = g.constant(s.image.reshape(&[1, 1, n, n]).map_err(|e| JsError::new(&e.to_string()))?);
    let m = sobel_gradients(&mut g, x).map_err(|e| JsError::new(&e.to_string()))?;
    Ok(rgba(&gray(g.value(m).data()), None))
}

/// Warp the ground-truth labels by a rotation and scale, then score the
/// warped labels against the originals. Returns `{rgba, metrics}` as JSON.
#[wasm_bindgen]
pub fn compare_json(seed: u32, es: bool, rotation_deg: f64, scale: f64) -> Result<String, JsError> {
    let s = slice(seed, es)?;
    let warp = Warp { angle_rad: rotation_deg.to_radians(), scale, displacement: Vec::new() };
    let moved = warp.apply(&s);
    let c = CaseMetrics::compute("demo", "demo", "", &moved.mask, &s.mask, 4, 1.0).map_err(|e| JsError::new(&e.to_string()))?;
    let classes: Vec<_> = (1..4)
        .map(|k| serde_json::json!({"class": CLASS_NAMES[k], "dice": c.dice[k], "iou": c.iou[k], "hd95": c.hd95[k]}))
        .collect();
    let px = rgba(&gray(s.image.data()), Some(&moved.mask));
    Ok(serde_json::json!({
        "rgba": px,
        "classes": classes,
        "mean_dice": c.mean_dice(),
        "mean_iou": c.mean_iou(),
        "mean_hd95": c.mean_hd95(),
    })
    .to_string())
}
