//! Central finite-difference gradient checking.
//!
//! A checked function maps input variables to a tensor of any shape. The
//! checker contracts that output with a fixed random cotangent to obtain a
//! scalar, computes analytic gradients with one backward pass, and compares
//! them against `(f(x + h) - f(x - h)) / 2h` evaluated in a no-grad graph.
//!
//! The reported error is normwise: `max |analytic - numeric|` divided by the
//! larger of `max |analytic|`, `max |numeric|` and an absolute floor, per
//! input. The floor keeps inputs whose true gradient is exactly zero (for
//! example a key bias under softmax shift invariance) from dividing
//! rounding noise by rounding noise.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::nn::{ParamStore, Session};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_input: String,
    pub probes: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub floor: f64,
    /// Probe at most this many coordinates per input (all when `None`).
    pub max_probes: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { step: DEFAULT_STEP, floor: DEFAULT_FLOOR, max_probes: None, seed: 0 }
    }
}

impl GradCheck {
    pub fn probes(mut self, n: usize) -> Self {
        self.max_probes = Some(n);
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn run<F>(&self, name: &str, inputs: &[(&str, Tensor)], f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);

        // analytic pass
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|(n, t)| g.param(*n, t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let cot = Tensor::uniform(g.shape(out), -1.0, 1.0, &mut rng);
        let c = g.constant(cot.clone());
        let prod = g.mul(out, c)?;
        let loss = g.sum(prod);
        g.backward(loss)?;
        let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad(v).expect("every input reached")).collect();

        let eval = |values: &[Tensor]| -> Result<f64> {
            let mut g = Graph::no_grad();
            let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
            let out = f(&mut g, &vars)?;
            Ok(g.value(out).dot(&cot))
        };

        let mut worst = 0.0f64;
        let mut worst_input = String::new();
        let mut probes = 0;
        let mut values: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
        for (k, (iname, t)) in inputs.iter().enumerate() {
            let n = t.numel();
            let idx: Vec<usize> = match self.max_probes {
                Some(p) if p < n => sample(&mut rng, n, p).into_vec(),
                _ => (0..n).collect(),
            };
            let (mut max_diff, mut max_a, mut max_n) = (0.0f64, 0.0f64, 0.0f64);
            for i in idx {
                let orig = values[k].data()[i];
                values[k].data_mut()[i] = orig + self.step;
                let fp = eval(&values)?;
                values[k].data_mut()[i] = orig - self.step;
                let fm = eval(&values)?;
                values[k].data_mut()[i] = orig;
                let numeric = (fp - fm) / (2.0 * self.step);
                let a = analytic[k].data()[i];
                max_diff = max_diff.max((a - numeric).abs());
                max_a = max_a.max(a.abs());
                max_n = max_n.max(numeric.abs());
                probes += 1;
            }
            let rel = max_diff / max_a.max(max_n).max(self.floor);
            if rel > worst || worst_input.is_empty() {
                worst = worst.max(rel);
                worst_input = iname.to_string();
            }
        }
        Ok(GradCheckReport { name: name.to_string(), max_rel_err: worst, worst_input, probes })
    }

    /// Check a module: every stored parameter under `prefix` joins `inputs`
    /// as a checked variable and is bound into the session under its name.
    pub fn run_module<F>(
        &self,
        name: &str,
        store: &ParamStore,
        prefix: &str,
        inputs: &[(&str, Tensor)],
        f: F,
    ) -> Result<GradCheckReport>
    where
        F: Fn(&mut Session, &[Var]) -> Result<Var>,
    {
        let params: Vec<(String, Tensor)> =
            store.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(k, v)| (k.clone(), v.clone())).collect();
        let mut all: Vec<(&str, Tensor)> = inputs.to_vec();
        all.extend(params.iter().map(|(k, v)| (k.as_str(), v.clone())));
        let n_in = inputs.len();
        self.run(name, &all, |g, vars| {
            let mut s = Session::new(g, store);
            for ((pname, _), v) in params.iter().zip(&vars[n_in..]) {
                s.bind(pname, *v);
            }
            f(&mut s, &vars[..n_in])
        })
    }
}
