//! Named parameters and the small layer vocabulary shared by the encoder,
//! the attention bottleneck and the decoder.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::autodiff::{Conv2dOpts, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered map of parameter name to value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Sub-store of every parameter whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// CRC-32 over names, shapes and little-endian values, in name order.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for (k, t) in &self.tensors {
            h.update(k.as_bytes());
            for d in t.shape() {
                h.update(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(&v.to_le_bytes());
            }
        }
        h.finalize()
    }
}

/// One forward pass: a graph plus the parameters bound onto it.
pub struct Session<'a> {
    pub g: &'a mut Graph,
    store: &'a ParamStore,
    bound: HashMap<String, Var>,
    frozen_prefixes: Vec<String>,
}

impl<'a> Session<'a> {
    pub fn new(g: &'a mut Graph, store: &'a ParamStore) -> Self {
        Self { g, store, bound: HashMap::new(), frozen_prefixes: Vec::new() }
    }

    /// Parameters under `prefix` enter the graph as constants.
    pub fn freeze(mut self, prefix: impl Into<String>) -> Self {
        self.frozen_prefixes.push(prefix.into());
        self
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Use `v` wherever parameter `name` is requested.
    pub fn bind(&mut self, name: &str, v: Var) {
        self.bound.insert(name.to_string(), v);
    }

    /// Bind a stored parameter, once per session.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name).ok_or_else(|| Error::MissingWeights(name.to_string()))?.clone();
        let v = if self.frozen_prefixes.iter().any(|p| name.starts_with(p.as_str())) {
            self.g.constant(t)
        } else {
            self.g.param(name, t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    /// `x · W + b` over the last axis, with `W: [in, out]`.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let y = self.g.matmul(x, w)?;
        let bname = format!("{prefix}.bias");
        if self.has(&bname) {
            let b = self.p(&bname)?;
            self.g.add(y, b)
        } else {
            Ok(y)
        }
    }

    pub fn conv(&mut self, x: Var, prefix: &str, opts: Conv2dOpts) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let bname = format!("{prefix}.bias");
        let b = if self.has(&bname) { Some(self.p(&bname)?) } else { None };
        self.g.conv2d(x, w, b, opts)
    }
}

/// `[B,C,H,W] -> [B,H·W,C]`
pub fn to_tokens(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    g.permute(flat, &[0, 2, 1])
}

/// `[B,H·W,C] -> [B,C,H,W]`
pub fn from_tokens(g: &mut Graph, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let t = g.permute(x, &[0, 2, 1])?;
    g.reshape(t, &[s[0], s[2], h, w])
}

/// Scaled dot-product attention with `heads` heads on `[B,T,·]` tensors.
/// Heads split the feature axis into contiguous equal slices.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let qs = g.shape(q).to_vec();
    let vs = g.shape(v).to_vec();
    let (b, t, dq, dv) = (qs[0], qs[1], qs[2], vs[2]);
    if heads == 0 || dq % heads != 0 || dv % heads != 0 {
        return Err(Error::Shape(format!("{heads} heads do not divide widths {dq}/{dv}")));
    }
    let (hq, hv) = (dq / heads, dv / heads);
    let split = |g: &mut Graph, x: Var, d: usize| -> Result<Var> {
        let tk = g.shape(x)[1];
        let r = g.reshape(x, &[b, tk, heads, d])?;
        g.permute(r, &[0, 2, 1, 3])
    };
    let qh = split(g, q, hq)?;
    let kh = split(g, k, hq)?;
    let vh = split(g, v, hv)?;
    let kt = g.transpose(kh)?;
    let logits = g.matmul(qh, kt)?;
    let logits = g.scale(logits, 1.0 / (hq as f64).sqrt());
    let att = g.softmax(logits, 3)?;
    let out = g.matmul(att, vh)?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    g.reshape(out, &[b, t, dv])
}

// ---- initialization ------------------------------------------------------

pub fn init_linear<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, prefix: &str, din: usize, dout: usize, bias: bool) {
    let std = (1.0 / din as f64).sqrt();
    store.insert(format!("{prefix}.weight"), Tensor::randn(&[din, dout], std, rng));
    if bias {
        store.insert(format!("{prefix}.bias"), Tensor::zeros(&[dout]));
    }
}

/// He-normal conv weights `[cout, cin/groups, k, k]`.
pub fn init_conv<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, prefix: &str, cout: usize, cin_g: usize, k: usize, bias: bool) {
    let std = (2.0 / (cin_g * k * k) as f64).sqrt();
    store.insert(format!("{prefix}.weight"), Tensor::randn(&[cout, cin_g, k, k], std, rng));
    if bias {
        store.insert(format!("{prefix}.bias"), Tensor::zeros(&[cout]));
    }
}

pub fn init_zeros(store: &mut ParamStore, name: impl Into<String>, shape: &[usize]) {
    store.insert(name, Tensor::zeros(shape));
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn missing_weight_is_an_error() {
        let store = ParamStore::new();
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &store);
        assert!(matches!(s.p("nope"), Err(Error::MissingWeights(_))));
    }

    #[test]
    fn frozen_prefix_binds_constants() {
        let mut store = ParamStore::new();
        store.insert("enc.w", Tensor::ones(&[2]));
        store.insert("dec.w", Tensor::ones(&[2]));
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &store).freeze("enc.");
        let e = s.p("enc.w").unwrap();
        let d = s.p("dec.w").unwrap();
        assert!(!s.g.requires_grad(e));
        assert!(s.g.requires_grad(d));
        assert_eq!(s.p("dec.w").unwrap(), d);
    }

    #[test]
    fn checksum_tracks_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = ParamStore::new();
        init_linear(&mut a, &mut rng, "l", 3, 2, true);
        let b = a.clone();
        assert_eq!(a.checksum(), b.checksum());
        a.get_mut("l.weight").unwrap().data_mut()[0] += 1e-12;
        assert_ne!(a.checksum(), b.checksum());
    }

    #[test]
    fn token_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[2, 3, 4, 5], 1.0, &mut rng);
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let t = to_tokens(&mut g, v).unwrap();
        assert_eq!(g.shape(t), &[2, 20, 3]);
        assert_eq!(g.value(t).at(&[1, 7, 2]), x.at(&[1, 2, 1, 2]));
        let back = from_tokens(&mut g, t, 4, 5).unwrap();
        assert!(g.value(back).bit_eq(&x));
    }
}
