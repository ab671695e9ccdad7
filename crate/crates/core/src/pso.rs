//! Particle swarm minimisation over a bounded box.
//!
//! Positions live in search coordinates: the value itself for linear
//! dimensions, its natural log for log dimensions. Clamping and velocity
//! arithmetic happen there.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Linear,
    Log,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dim {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    pub scale: Scale,
}

impl Dim {
    pub fn linear(name: &str, lo: f64, hi: f64) -> Self {
        Self { name: name.into(), lo, hi, scale: Scale::Linear }
    }

    pub fn log(name: &str, lo: f64, hi: f64) -> Self {
        Self { name: name.into(), lo, hi, scale: Scale::Log }
    }

    fn to_search(&self, v: f64) -> f64 {
        match self.scale {
            Scale::Linear => v,
            Scale::Log => v.ln(),
        }
    }

    fn to_value(&self, s: f64) -> f64 {
        match self.scale {
            Scale::Linear => s,
            // exact at the bounds
            Scale::Log if s <= self.lo.ln() => self.lo,
            Scale::Log if s >= self.hi.ln() => self.hi,
            Scale::Log => s.exp(),
        }
    }

    fn bounds(&self) -> (f64, f64) {
        (self.to_search(self.lo), self.to_search(self.hi))
    }

    pub fn collapsed(&self) -> bool {
        self.lo == self.hi
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub dims: Vec<Dim>,
}

impl SearchSpace {
    pub fn new(dims: Vec<Dim>) -> Result<Self> {
        let s = Self { dims };
        s.validate()?;
        Ok(s)
    }

    /// A single collapsed dimension (lo == hi) is allowed and stays fixed.
    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::Config("search space has no dimensions".into()));
        }
        for d in &self.dims {
            if !(d.lo.is_finite() && d.hi.is_finite() && d.lo <= d.hi) {
                return Err(Error::Config(format!("dimension `{}` needs finite lo ≤ hi, got [{}, {}]", d.name, d.lo, d.hi)));
            }
            if d.scale == Scale::Log && d.lo <= 0.0 {
                return Err(Error::Config(format!("log dimension `{}` needs lo > 0", d.name)));
            }
        }
        Ok(())
    }

    pub fn collapsed(&self) -> bool {
        self.dims.iter().all(Dim::collapsed)
    }

    pub fn to_values(&self, pos: &[f64]) -> Vec<f64> {
        self.dims.iter().zip(pos).map(|(d, &s)| d.to_value(s)).collect()
    }

    pub fn to_search(&self, values: &[f64]) -> Vec<f64> {
        self.dims.iter().zip(values).map(|(d, &v)| d.to_search(v)).collect()
    }

    pub fn clamp(&self, pos: &mut [f64]) {
        for (d, x) in self.dims.iter().zip(pos) {
            let (lo, hi) = d.bounds();
            *x = x.clamp(lo, hi);
        }
    }

    pub fn contains(&self, pos: &[f64]) -> bool {
        self.dims.iter().zip(pos).all(|(d, &x)| {
            let (lo, hi) = d.bounds();
            x >= lo && x <= hi
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsoConfig {
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
    pub threads: usize,
}

impl Default for PsoConfig {
    fn default() -> Self {
        Self { inertia: 0.729, cognitive: 1.49445, social: 1.49445, threads: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub iteration: usize,
    pub particle: usize,
    /// In value coordinates.
    pub position: Vec<f64>,
    pub objective: f64,
}

#[derive(Clone, Debug)]
pub struct Swarm {
    pub cfg: PsoConfig,
    pub x: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
    pub fp: Vec<f64>,
    pub g: Vec<f64>,
    pub fg: f64,
    pub iteration: usize,
    rng: ChaCha8Rng,
}

fn sanitize(f: f64) -> f64 {
    if f.is_finite() {
        f
    } else {
        f64::INFINITY
    }
}

/// Evaluate every position, in parallel when allowed; results in input order.
fn evaluate_all<F>(space: &SearchSpace, xs: &[Vec<f64>], f: &F, threads: usize) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let vals: Vec<Vec<f64>> = xs.iter().map(|x| space.to_values(x)).collect();
    let threads = threads.clamp(1, xs.len().max(1));
    if threads == 1 {
        return vals.iter().map(|v| f(v)).collect();
    }
    let mut out = vec![0.0; xs.len()];
    let chunk = xs.len().div_ceil(threads);
    std::thread::scope(|scope| {
        for (o, v) in out.chunks_mut(chunk).zip(vals.chunks(chunk)) {
            scope.spawn(move || {
                for (oi, vi) in o.iter_mut().zip(v) {
                    *oi = f(vi);
                }
            });
        }
    });
    out
}

impl Swarm {
    /// Uniform initial positions with zero velocity. `incumbents` (value
    /// coordinates) replace the first particles.
    pub fn new(space: &SearchSpace, particles: usize, seed: u64, cfg: PsoConfig, incumbents: &[Vec<f64>]) -> Result<Self> {
        space.validate()?;
        if particles < 2 {
            return Err(Error::Config(format!("PSO needs at least 2 particles, got {particles}")));
        }
        if incumbents.len() > particles || incumbents.iter().any(|p| p.len() != space.dims.len()) {
            return Err(Error::Config("incumbents must fit the swarm and the space".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..particles)
            .map(|i| match incumbents.get(i) {
                Some(v) => {
                    let mut s = space.to_search(v);
                    space.clamp(&mut s);
                    s
                }
                None => space
                    .dims
                    .iter()
                    .map(|d| {
                        let (lo, hi) = d.bounds();
                        if lo < hi { rng.gen_range(lo..=hi) } else { lo }
                    })
                    .collect(),
            })
            .collect();
        let n = space.dims.len();
        Ok(Self {
            cfg,
            v: vec![vec![0.0; n]; particles],
            p: x.clone(),
            fp: vec![f64::INFINITY; particles],
            g: x[0].clone(),
            fg: f64::INFINITY,
            x,
            iteration: 0,
            rng,
        })
    }

    fn absorb(&mut self, fx: &[f64]) {
        for (i, &f) in fx.iter().enumerate() {
            if f < self.fp[i] {
                self.fp[i] = f;
                self.p[i] = self.x[i].clone();
            }
            if f < self.fg {
                self.fg = f;
                self.g = self.x[i].clone();
            }
        }
    }

    /// Velocity and position update with per-dimension uniforms drawn in
    /// particle-major order; the global best used is the one from the
    /// start of the step.
    pub fn advance(&mut self, space: &SearchSpace) {
        let PsoConfig { inertia: w, cognitive: c1, social: c2, .. } = self.cfg;
        for i in 0..self.x.len() {
            for d in 0..self.x[i].len() {
                let r1: f64 = self.rng.gen();
                let r2: f64 = self.rng.gen();
                self.v[i][d] = w * self.v[i][d] + c1 * r1 * (self.p[i][d] - self.x[i][d]) + c2 * r2 * (self.g[d] - self.x[i][d]);
                self.x[i][d] += self.v[i][d];
            }
            space.clamp(&mut self.x[i]);
        }
        self.iteration += 1;
    }

    pub fn evaluate<F>(&mut self, space: &SearchSpace, f: &F) -> Vec<Evaluation>
    where
        F: Fn(&[f64]) -> f64 + Sync,
    {
        let raw = evaluate_all(space, &self.x, f, self.cfg.threads);
        let fx: Vec<f64> = raw.iter().map(|&v| sanitize(v)).collect();
        for (i, &v) in raw.iter().enumerate() {
            if !v.is_finite() {
                log::warn!("particle {i} at iteration {}: non-finite objective {v}", self.iteration);
            }
        }
        self.absorb(&fx);
        self.x
            .iter()
            .zip(&raw)
            .enumerate()
            .map(|(i, (x, &o))| Evaluation { iteration: self.iteration, particle: i, position: space.to_values(x), objective: o })
            .collect()
    }
}

/// One iteration: move, then evaluate.
pub fn pso_step<F>(swarm: &mut Swarm, space: &SearchSpace, f: &F) -> Vec<Evaluation>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    swarm.advance(space);
    swarm.evaluate(space, f)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsoResult {
    /// In value coordinates.
    pub best_position: Vec<f64>,
    pub best_value: f64,
    /// Global best after initialisation and after every iteration.
    pub history: Vec<f64>,
    pub evaluations: Vec<Evaluation>,
}

impl PsoResult {
    /// `iteration,particle,<dims>,objective`, best first.
    pub fn leaderboard_csv(&self, space: &SearchSpace) -> String {
        let mut rows = self.evaluations.clone();
        rows.sort_by(|a, b| sanitize(a.objective).total_cmp(&sanitize(b.objective)).then(a.iteration.cmp(&b.iteration)).then(a.particle.cmp(&b.particle)));
        let mut out = String::from("iteration,particle");
        for d in &space.dims {
            out.push(',');
            out.push_str(&d.name);
        }
        out.push_str(",objective\n");
        for r in rows {
            out.push_str(&format!("{},{}", r.iteration, r.particle));
            for v in &r.position {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{}\n", r.objective));
        }
        out
    }
}

pub fn optimize<F>(
    space: &SearchSpace,
    f: &F,
    particles: usize,
    iters: usize,
    seed: u64,
    cfg: PsoConfig,
    incumbents: &[Vec<f64>],
) -> Result<PsoResult>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let mut swarm = Swarm::new(space, particles, seed, cfg, incumbents)?;
    if space.collapsed() {
        let x = swarm.x[0].clone();
        let v = sanitize(f(&space.to_values(&x)));
        return Ok(PsoResult {
            best_position: space.to_values(&x),
            best_value: v,
            history: vec![v],
            evaluations: vec![Evaluation { iteration: 0, particle: 0, position: space.to_values(&x), objective: v }],
        });
    }
    let mut evaluations = swarm.evaluate(space, f);
    let mut history = vec![swarm.fg];
    for _ in 0..iters {
        evaluations.extend(pso_step(&mut swarm, space, f));
        history.push(swarm.fg);
    }
    Ok(PsoResult { best_position: space.to_values(&swarm.g), best_value: swarm.fg, history, evaluations })
}
