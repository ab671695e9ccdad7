//! Hyperparameter search over loss weights, decoder lr and width with PSO.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::phantom::{Dataset, SegSample};
use crate::pso::{self, Dim, PsoConfig, PsoResult, SearchSpace};
use crate::train::{self, TrainOptions};

/// Config keys searched by default, with their boxes.
pub fn default_space() -> SearchSpace {
    SearchSpace {
        dims: vec![
            Dim::linear("alpha", 0.0, 1.0),
            Dim::linear("beta", 0.0, 1.0),
            Dim::linear("gamma", 0.0, 0.5),
            Dim::linear("lambda", 0.0, 0.3),
            Dim::linear("theta", 1.0, 10.0),
            Dim::log("lr_decoder", 1e-4, 1e-2),
            Dim::linear("width_multiplier", 0.0625, 0.25),
        ],
    }
}

#[derive(Clone, Debug)]
pub struct TuneOptions {
    pub particles: usize,
    pub iterations: usize,
    /// Epochs per trial run; the base config's when unset.
    pub trial_epochs: Option<usize>,
    pub seed: u64,
    pub threads: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TuneResult {
    pub pso: PsoResult,
    pub best_config: String,
    /// Objective of the untouched base config, evaluated as the first particle.
    pub incumbent_value: f64,
}

pub fn apply(base: &RunConfig, space: &SearchSpace, values: &[f64]) -> Result<RunConfig> {
    let mut c = base.clone();
    for (d, v) in space.dims.iter().zip(values) {
        c.set(&d.name, &v.to_string())?;
    }
    c.validate()?;
    Ok(c)
}

pub fn incumbent(base: &RunConfig, space: &SearchSpace) -> Result<Vec<f64>> {
    let v = space.dims.iter().map(|d| base.get(&d.name)?.parse::<f64>().map_err(|e| Error::Config(format!("{}: {e}", d.name)))).collect::<Result<Vec<_>>>()?;
    if !space.contains(&space.to_search(&v)) {
        return Err(Error::Config(format!("base config {v:?} lies outside the search space")));
    }
    Ok(v)
}

/// `1 − validation Dice` after a short run on the train split; invalid
/// configs and failed runs score +inf.
pub fn objective(base: &RunConfig, space: &SearchSpace, ds: &Dataset, values: &[f64]) -> f64 {
    let run = || -> Result<f64> {
        let cfg = apply(base, space, values)?;
        let split = train::split_for(&cfg, ds)?;
        let tr: Vec<&SegSample> = ds.of_patients(&split.train).collect();
        let va: Vec<&SegSample> = ds.of_patients(&split.val).collect();
        if va.is_empty() {
            return Err(Error::Config("tuning needs a non-empty validation split".into()));
        }
        let res = train::train(&cfg, &tr, &[], &TrainOptions { threads: 1, ..Default::default() })?;
        let (dice, _) = train::quick_validate(&res.store, &cfg, &va, 1)?;
        Ok(1.0 - dice)
    };
    run().unwrap_or_else(|e| {
        log::warn!("trial {values:?} failed: {e}");
        f64::INFINITY
    })
}

pub fn tune(base: &RunConfig, space: &SearchSpace, ds: &Dataset, opts: &TuneOptions) -> Result<TuneResult> {
    let mut base = base.clone();
    if let Some(e) = opts.trial_epochs {
        base.epochs = e;
    }
    let inc = incumbent(&base, space)?;
    let cfg = PsoConfig { threads: opts.threads.max(1), ..Default::default() };
    let f = |v: &[f64]| objective(&base, space, ds, v);
    let pso = pso::optimize(space, &f, opts.particles, opts.iterations, opts.seed, cfg, &[inc])?;
    let incumbent_value = pso.evaluations.iter().find(|e| e.iteration == 0 && e.particle == 0).map_or(f64::INFINITY, |e| e.objective);
    let best_config = apply(&base, space, &pso.best_position)?.to_text();
    Ok(TuneResult { pso, best_config, incumbent_value })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_defaults_lie_inside_the_space() {
        let base = RunConfig::desk();
        let s = default_space();
        let v = incumbent(&base, &s).unwrap();
        assert_eq!(apply(&base, &s, &v).unwrap().to_text(), base.to_text());
    }

    #[test]
    fn outside_incumbent_rejected() {
        let mut base = RunConfig::desk();
        base.loss.theta = 50.0;
        assert!(incumbent(&base, &default_space()).is_err());
    }
}
