//! Full segmentation network: frozen encoder, structure attention, decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::nn::{ParamStore, Session};
use crate::tensor::Tensor;
use crate::{csam, decoder, encoder};

/// Encoder weights come from the encoder's own seed; everything trainable
/// from `seed`.
pub fn init(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    encoder::init(&cfg.encoder, &mut store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if cfg.use_csam {
        csam::init(&cfg.csam, &mut store, &mut rng)?;
    }
    decoder::init(&cfg.decoder, cfg.encoder.embed_dim, &mut store, &mut rng)?;
    Ok(store)
}

/// Session over `store` with the encoder bound as constants when frozen.
pub fn session<'a>(g: &'a mut Graph, store: &'a ParamStore, cfg: &ModelConfig) -> Session<'a> {
    let s = Session::new(g, store);
    if cfg.freeze_backbone {
        s.freeze(encoder::PREFIX)
    } else {
        s
    }
}

pub struct ModelOutput {
    /// `[B,K,H,W]` at the input resolution.
    pub logits: Var,
    pub edge: Option<Var>,
}

/// `[B,1,H,W] → [B,K,H,W]`.
pub fn forward(s: &mut Session, cfg: &ModelConfig, x: Var) -> Result<ModelOutput> {
    let shape = s.g.shape(x).to_vec();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(Error::Shape(format!("model input must be [B,1,H,W], got {shape:?}")));
    }
    let f = encoder::encode(s, &cfg.encoder, x)?;
    let f = if cfg.use_csam { csam::forward(s, &cfg.csam, f)? } else { f };
    let out = decoder::forward(s, &cfg.decoder, f)?;
    let logits = decoder::upsample_logits(&mut s.g, out.logits, shape[2], shape[3])?;
    Ok(ModelOutput { logits, edge: out.edge })
}

/// Stack `[1,H,W]` images into `[B,1,H,W]`.
pub fn batch_images(images: &[&Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
    let (h, w) = match first.shape() {
        [1, h, w] => (*h, *w),
        s => return Err(Error::Shape(format!("image must be [1,H,W], got {s:?}"))),
    };
    let mut data = Vec::with_capacity(images.len() * h * w);
    for im in images {
        if im.shape() != [1, h, w] {
            return Err(Error::Shape("images differ in size".into()));
        }
        data.extend_from_slice(im.data());
    }
    Tensor::new(&[images.len(), 1, h, w], data)
}

/// Per-pixel argmax over the class axis of `[B,K,H,W]` logits.
pub fn argmax_masks(logits: &Tensor) -> Result<Vec<Mask>> {
    let [b, k, h, w] = logits.shape()[..] else {
        return Err(Error::Shape(format!("logits must be [B,K,H,W], got {:?}", logits.shape())));
    };
    let d = logits.data();
    (0..b)
        .map(|bi| {
            let labels = (0..h * w)
                .map(|i| {
                    let mut best = 0;
                    for c in 1..k {
                        if d[(bi * k + c) * h * w + i] > d[(bi * k + best) * h * w + i] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            Mask::new(h, w, labels)
        })
        .collect()
}

/// Gradient-free forward; returns `(logits, edge probabilities)`.
pub fn infer(store: &ParamStore, cfg: &ModelConfig, images: &[&Tensor]) -> Result<(Tensor, Option<Tensor>)> {
    let x = batch_images(images)?;
    let mut g = Graph::no_grad();
    let xv = g.constant(x);
    let mut s = session(&mut g, store, cfg);
    let out = forward(&mut s, cfg, xv)?;
    let edge = out.edge.map(|e| s.g.value(e).clone());
    Ok((s.g.value(out.logits).clone(), edge))
}

/// Argmax masks for any number of images, in batches of `batch`, spread
/// over up to `threads` workers.
pub fn predict(store: &ParamStore, cfg: &ModelConfig, images: &[&Tensor], batch: usize, threads: usize) -> Result<Vec<Mask>> {
    let chunks: Vec<&[&Tensor]> = images.chunks(batch.max(1)).collect();
    let threads = threads.clamp(1, chunks.len().max(1));
    let mut out: Vec<Option<Result<Vec<Mask>>>> = (0..chunks.len()).map(|_| None).collect();
    let per = chunks.len().div_ceil(threads).max(1);
    std::thread::scope(|scope| {
        for (slots, work) in out.chunks_mut(per).zip(chunks.chunks(per)) {
            scope.spawn(move || {
                for (slot, c) in slots.iter_mut().zip(work) {
                    *slot = Some(infer(store, cfg, c).and_then(|(l, _)| argmax_masks(&l)));
                }
            });
        }
    });
    let mut masks = Vec::with_capacity(images.len());
    for r in out {
        masks.extend(r.expect("every chunk ran")?);
    }
    Ok(masks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::csam::set_param;

    fn small() -> ModelConfig {
        let mut m = RunConfig::desk().model;
        m.encoder.input_size = 32;
        m.encoder.embed_dim = 16;
        m.encoder.heads = 2;
        m.encoder.depth = 1;
        m.csam.channels = 16;
        m.csam.key_dim = 16;
        m.csam.heads = 2;
        m
    }

    fn image(seed: u64) -> Tensor {
        Tensor::randn(&[1, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn output_shapes_and_variants() {
        for (csam_on, brm) in [(true, true), (false, false), (true, false)] {
            let mut cfg = small();
            cfg.use_csam = csam_on;
            cfg.decoder.brm = brm;
            let store = init(&cfg, 0).unwrap();
            assert_eq!(store.names().any(|n| n.starts_with("csam.")), csam_on);
            let (a, b) = (image(1), image(2));
            let (logits, edge) = infer(&store, &cfg, &[&a, &b]).unwrap();
            assert_eq!(logits.shape(), [2, 4, 32, 32]);
            assert_eq!(edge.is_some(), brm);
            let masks = predict(&store, &cfg, &[&a, &b, &a], 2, 2).unwrap();
            assert_eq!(masks.len(), 3);
            assert_eq!(masks[0], masks[2]);
        }
    }

    #[test]
    fn frozen_encoder_gets_no_gradient() {
        let cfg = small();
        let store = init(&cfg, 0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(batch_images(&[&image(3)]).unwrap());
        let mut s = session(&mut g, &store, &cfg);
        let out = forward(&mut s, &cfg, x).unwrap();
        let loss = s.g.mean(out.logits);
        g.backward(loss).unwrap();
        let names: Vec<String> = g.param_grads().into_iter().map(|(n, _)| n).collect();
        assert!(!names.is_empty());
        assert!(names.iter().all(|n| !n.starts_with(encoder::PREFIX)));
    }

    #[test]
    fn argmax_picks_largest_logit() {
        let mut t = Tensor::zeros(&[1, 3, 1, 2]);
        t.set(&[0, 2, 0, 0], 1.0);
        t.set(&[0, 1, 0, 1], -1.0);
        let m = argmax_masks(&t).unwrap();
        assert_eq!(m[0].data(), &[2, 0]);
    }

    #[test]
    fn zero_fuse_keeps_encoder_features() {
        // with CSAM fusion at its zero init, CSAM on/off give identical logits
        let on = small();
        let mut off = small();
        off.use_csam = false;
        let mut s_on = init(&on, 5).unwrap();
        let s_off = init(&off, 5).unwrap();
        for (n, t) in s_off.iter() {
            if s_on.contains(n) {
                set_param(&mut s_on, n, |_| t.clone());
            }
        }
        let im = image(4);
        let (a, _) = infer(&s_on, &on, &[&im]).unwrap();
        let (b, _) = infer(&s_off, &off, &[&im]).unwrap();
        assert!(a.bit_eq(&b));
    }
}
