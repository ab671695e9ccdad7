//! Training, evaluation, ablation and cross-validation on phantom data.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::encoder;
use crate::error::{Error, Result};
use crate::losses::{self, composite_loss, LossBreakdown, LossConfig, LossTarget};
use crate::mask::Mask;
use crate::metrics::{self, CaseMetrics, MetricReport, ReportOptions};
use crate::model;
use crate::nn::ParamStore;
use crate::optim::{self, AdamWConfig, OptimizerState};
use crate::phantom::{self, Dataset, Phase, SegSample, Split};
use crate::tensor::{DType, Tensor};

const EPOCH_STREAM: u64 = 0x5eed_e90c;

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Logs and the per-epoch checkpoint go here when set.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many completed epochs (the schedule still spans
    /// `epochs`), for interrupted runs.
    pub halt_after: Option<usize>,
    pub resume: Option<PathBuf>,
    pub threads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub lr_backbone: f64,
    pub lr_decoder: f64,
    pub loss: LossBreakdown,
    pub val_dice: Option<f64>,
    pub val_hd95: Option<f64>,
    pub encoder_checksum: u32,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub store: ParamStore,
    pub optimizer: OptimizerState,
    pub logs: Vec<EpochLog>,
    pub epochs_done: usize,
    pub initial_encoder_checksum: u32,
}

pub fn threads_from_env() -> usize {
    std::env::var("CARDIOSEG_THREADS").ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0).unwrap_or(1)
}

/// Patient-level split of `ds` for `cfg`.
pub fn split_for(cfg: &RunConfig, ds: &Dataset) -> Result<Split> {
    phantom::split_patients(&ds.meta.patients, cfg.split, cfg.seed)
}

fn check_classes(cfg: &RunConfig, samples: &[&SegSample]) -> Result<()> {
    let k = cfg.model.decoder.num_classes;
    if let Some(s) = samples.iter().find(|s| s.mask.max_label() as usize >= k) {
        return Err(Error::Config(format!("{} has label {} but the model has {k} classes", s.case_id(), s.mask.max_label())));
    }
    Ok(())
}

fn dump_batch(dir: &Path, batch: &[SegSample], epoch: usize, step: usize) -> Result<()> {
    let d = dir.join("nonfinite_batch");
    fs::create_dir_all(&d)?;
    for s in batch {
        s.image.write_tns(&d.join(format!("{}.tns", s.case_id())), DType::F64)?;
        s.mask.to_tensor().write_tns(&d.join(format!("{}_mask.tns", s.case_id())), DType::F32)?;
    }
    fs::write(d.join("info.json"), serde_json::json!({"epoch": epoch, "step": step}).to_string())?;
    Ok(())
}

/// One optimisation step on `batch`; returns the loss breakdown.
pub fn train_step(
    cfg: &RunConfig,
    loss_cfg: &LossConfig,
    store: &mut ParamStore,
    groups: &[optim::ParamGroup],
    state: &mut OptimizerState,
    lrs: &[f64],
    batch: &[SegSample],
) -> Result<Option<LossBreakdown>> {
    let images: Vec<&Tensor> = batch.iter().map(|s| &s.image).collect();
    let masks: Vec<Mask> = batch.iter().map(|s| s.mask.clone()).collect();
    let target = LossTarget::new(&masks, cfg.model.decoder.num_classes, loss_cfg.theta, loss_cfg.sides)?;
    let mut g = Graph::new();
    let x = g.constant(model::batch_images(&images)?);
    let (loss, br) = {
        let mut s = model::session(&mut g, store, &cfg.model);
        let out = model::forward(&mut s, &cfg.model, x)?;
        composite_loss(s.g, out.logits, &target, loss_cfg)?
    };
    if !br.total.is_finite() {
        return Ok(None);
    }
    g.backward(loss)?;
    let grads: HashMap<String, Tensor> = g.param_grads().into_iter().collect();
    if grads.values().any(|t| !t.is_finite()) {
        return Ok(None);
    }
    optim::adamw_step(store, &grads, groups, state, lrs)?;
    Ok(Some(br))
}

/// Mean foreground Dice and HD95 (pixels) of `samples`.
pub fn quick_validate(store: &ParamStore, cfg: &RunConfig, samples: &[&SegSample], threads: usize) -> Result<(f64, f64)> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let pred = model::predict(store, &cfg.model, &images, cfg.batch_size, threads)?;
    let k = cfg.model.decoder.num_classes;
    let (mut dice, mut hd) = (0.0, 0.0);
    for (p, s) in pred.iter().zip(samples) {
        let c = CaseMetrics::compute("", "", "", p, &s.mask, k, 1.0)?;
        dice += c.mean_dice();
        hd += c.mean_hd95();
    }
    let n = samples.len() as f64;
    Ok((dice / n, hd / n))
}

pub fn train(cfg: &RunConfig, train_set: &[&SegSample], val_set: &[&SegSample], opts: &TrainOptions) -> Result<TrainResult> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    check_classes(cfg, train_set)?;
    check_classes(cfg, val_set)?;
    let threads = opts.threads.max(1);

    let (mut store, mut state, start) = match &opts.resume {
        Some(dir) => {
            let ck = Checkpoint::load(dir)?;
            if ck.config.hash() != cfg.hash() {
                return Err(Error::Config(format!("checkpoint {} was written by a different config", dir.display())));
            }
            (ck.store, ck.optimizer, ck.epoch)
        }
        None => (model::init(&cfg.model, cfg.seed)?, OptimizerState::new(AdamWConfig::default()), 0),
    };
    let initial_encoder_checksum = encoder::checksum(&store);
    let groups = optim::build_groups(&store, cfg.model.freeze_backbone, &cfg.lr)?;
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let stop = opts.halt_after.map_or(cfg.epochs, |h| h.min(cfg.epochs));

    let mut log_file = match &opts.out_dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            fs::write(d.join("config.cfg"), cfg.to_text())?;
            let f = fs::OpenOptions::new().create(true).append(true).open(d.join("train_log.ndjson"))?;
            Some(f)
        }
        None => None,
    };

    let mut logs = Vec::new();
    for epoch in start..stop {
        let t0 = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(phantom::derive_seed(cfg.seed ^ EPOCH_STREAM, epoch as u64));
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<SegSample> = idx.iter().map(|&i| phantom::augment(train_set[i], &cfg.augment, &mut rng)).collect();
            let t = state.step as usize;
            let lrs = optim::group_lrs(&groups, t, total_steps, cfg.lr_min_ratio)?;
            match train_step(cfg, &cfg.loss, &mut store, &groups, &mut state, &lrs, &batch)? {
                Some(br) => sum += br.scaled(batch.len() as f64),
                None => {
                    if let Some(d) = &opts.out_dir {
                        dump_batch(d, &batch, epoch + 1, bi)?;
                    }
                    return Err(Error::NonFiniteLoss { epoch: epoch + 1, step: bi });
                }
            }
        }
        let (val_dice, val_hd95) = if val_set.is_empty() {
            (None, None)
        } else {
            let (d, h) = quick_validate(&store, cfg, val_set, threads)?;
            (Some(d), Some(h))
        };
        let t_end = (state.step as usize).min(total_steps);
        let lrs = optim::group_lrs(&groups, t_end, total_steps, cfg.lr_min_ratio)?;
        let entry = EpochLog {
            epoch: epoch + 1,
            step: state.step,
            lr_backbone: lrs[0],
            lr_decoder: lrs[1],
            loss: sum.scaled(1.0 / train_set.len() as f64),
            val_dice,
            val_hd95,
            encoder_checksum: encoder::checksum(&store),
        };
        log::info!(
            "epoch {}/{} loss {:.4} val dice {} ({:.1}s)",
            entry.epoch,
            cfg.epochs,
            entry.loss.total,
            entry.val_dice.map_or("-".into(), |d| format!("{d:.4}")),
            t0.elapsed().as_secs_f64()
        );
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&entry)?)?;
        }
        if let Some(d) = &opts.out_dir {
            Checkpoint { config: cfg.clone(), store: store.clone(), optimizer: state.clone(), epoch: epoch + 1 }.save(&d.join("checkpoint"))?;
        }
        logs.push(entry);
    }
    Ok(TrainResult { store, optimizer: state, logs, epochs_done: stop.max(start), initial_encoder_checksum })
}

/// Train on the configured split of `ds`, validating on its val part.
pub fn train_dataset(cfg: &RunConfig, ds: &Dataset, opts: &TrainOptions) -> Result<(TrainResult, Split)> {
    let split = split_for(cfg, ds)?;
    let tr: Vec<&SegSample> = ds.of_patients(&split.train).collect();
    let va: Vec<&SegSample> = ds.of_patients(&split.val).collect();
    Ok((train(cfg, &tr, &va, opts)?, split))
}

pub fn read_log(path: &Path) -> Result<Vec<EpochLog>> {
    fs::read_to_string(path)?.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricReport,
    pub cases: Vec<CaseMetrics>,
}

impl Evaluation {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&self.report)?)?;
        fs::write(dir.join("report.txt"), self.report.to_text())?;
        let names: Vec<String> = self.report.per_class.iter().map(|c| c.class.clone()).collect();
        fs::write(dir.join("cases.csv"), metrics::cases_csv(&self.cases, &names))?;
        Ok(())
    }
}

/// Metrics of predicted masks against ground truth; EF and volume errors
/// need both phases of a patient.
pub fn evaluate_masks(cfg: &RunConfig, samples: &[&SegSample], pred: &[Mask]) -> Result<Evaluation> {
    let k = cfg.model.decoder.num_classes;
    let cases = samples
        .iter()
        .zip(pred)
        .map(|(s, p)| CaseMetrics::compute(&s.case_id(), &s.patient_id, &s.phase.to_string(), p, &s.mask, k, cfg.spacing_mm))
        .collect::<Result<Vec<_>>>()?;

    let mut by_patient: BTreeMap<&str, [(Vec<Mask>, Vec<Mask>); 2]> = BTreeMap::new();
    for (s, p) in samples.iter().zip(pred) {
        let e = by_patient.entry(&s.patient_id).or_default();
        let slot = &mut e[(s.phase == Phase::ES) as usize];
        slot.0.push(p.clone());
        slot.1.push(s.mask.clone());
    }
    let voxel = cfg.voxel_mm3();
    let (mut ef, mut vol) = (Vec::new(), Vec::new());
    for [(ped, ged), (pes, ges)] in by_patient.values() {
        if !ged.is_empty() {
            vol.push(metrics::volume_error_ml(ped, ged, voxel));
        }
        if !ges.is_empty() {
            vol.push(metrics::volume_error_ml(pes, ges, voxel));
        }
        if !ged.is_empty() && !ges.is_empty() && metrics::lv_volume_ml(ged, voxel) > 0.0 {
            match metrics::ef_error(ped, pes, ged, ges, voxel) {
                Ok(e) => ef.push(e),
                // predicted ED cavity empty: EF undefined for this patient
                Err(_) => ef.push(100.0),
            }
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let opts = ReportOptions { spacing_mm: cfg.spacing_mm, bootstrap: Some((1000, 0.95, cfg.seed)), ..Default::default() };
    let report = metrics::build_report(&cases, &opts, mean(&ef), mean(&vol))?;
    Ok(Evaluation { report, cases })
}

pub fn evaluate(store: &ParamStore, cfg: &RunConfig, samples: &[&SegSample], threads: usize) -> Result<Evaluation> {
    check_classes(cfg, samples)?;
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let pred = model::predict(store, &cfg.model, &images, cfg.batch_size, threads)?;
    evaluate_masks(cfg, samples, &pred)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub dice: f64,
    pub iou: f64,
    pub hd95: f64,
    pub ef_error: Option<f64>,
    pub precision: f64,
}

impl AblationRow {
    fn from_report(label: &str, r: &MetricReport) -> Self {
        Self { label: label.into(), dice: r.mean_dice, iou: r.mean_iou, hd95: r.mean_hd95, ef_error: r.ef_error, precision: r.precision }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTables {
    pub architecture: Vec<AblationRow>,
    pub loss: Vec<AblationRow>,
}

pub const ARCHITECTURE_ROWS: [&str; 5] = [
    "SAM Encoder + Basic Decoder",
    "+ Multi-Scale Fusion",
    "+ Cardiac-Specific Attention (CSAM)",
    "+ Boundary Refinement (BRM)",
    "+ Composite Loss (Full Pipeline)",
];

/// Cumulative architecture variants; the first four train on Dice + CE.
pub fn architecture_variants(base: &RunConfig) -> Vec<(&'static str, RunConfig)> {
    let dice_ce = LossConfig { focal_gamma: 0.0, ..base.loss.with_terms(true, true, false, false) };
    let mut c = base.clone();
    c.loss = dice_ce;
    c.model.use_csam = false;
    c.model.decoder.attention = false;
    c.model.decoder.multi_scale = false;
    c.model.decoder.brm = false;
    let mut out = vec![(ARCHITECTURE_ROWS[0], c.clone())];
    c.model.decoder.attention = true;
    c.model.decoder.multi_scale = true;
    out.push((ARCHITECTURE_ROWS[1], c.clone()));
    c.model.use_csam = true;
    out.push((ARCHITECTURE_ROWS[2], c.clone()));
    c.model.decoder.brm = true;
    out.push((ARCHITECTURE_ROWS[3], c.clone()));
    c.loss = base.loss.clone();
    out.push((ARCHITECTURE_ROWS[4], c));
    out
}

/// Full architecture under each loss configuration.
pub fn loss_variants(base: &RunConfig) -> Vec<(&'static str, RunConfig)> {
    let mut full = base.clone();
    full.model.use_csam = true;
    full.model.decoder.attention = true;
    full.model.decoder.multi_scale = true;
    full.model.decoder.brm = true;
    losses::loss_presets()
        .into_iter()
        .map(|(label, p)| {
            let mut c = full.clone();
            let keep = |on: bool, w: f64| if on { w } else { 0.0 };
            c.loss.alpha = keep(p.alpha > 0.0, base.loss.alpha);
            c.loss.beta = keep(p.beta > 0.0, base.loss.beta);
            c.loss.gamma = keep(p.gamma > 0.0, base.loss.gamma);
            c.loss.lambda = keep(p.lambda > 0.0, base.loss.lambda);
            (label, c)
        })
        .collect()
}

/// Train on the split's train part, score on its test part.
pub fn run_variant(cfg: &RunConfig, ds: &Dataset, threads: usize) -> Result<Evaluation> {
    let split = split_for(cfg, ds)?;
    let tr: Vec<&SegSample> = ds.of_patients(&split.train).collect();
    let te: Vec<&SegSample> = ds.of_patients(&split.test).collect();
    let res = train(cfg, &tr, &[], &TrainOptions { threads, ..Default::default() })?;
    evaluate(&res.store, cfg, &te, threads)
}

/// Both ablation tables with every row sharing `base.seed`. Identical
/// configurations are trained once.
pub fn ablate(base: &RunConfig, ds: &Dataset, threads: usize) -> Result<AblationTables> {
    let mut cache: Vec<(String, MetricReport)> = Vec::new();
    let mut row = |label: &str, cfg: &RunConfig| -> Result<AblationRow> {
        let key = cfg.to_text();
        if let Some((_, r)) = cache.iter().find(|(k, _)| *k == key) {
            return Ok(AblationRow::from_report(label, r));
        }
        log::info!("ablation: {label}");
        let r = run_variant(cfg, ds, threads)?.report;
        let out = AblationRow::from_report(label, &r);
        cache.push((key, r));
        Ok(out)
    };
    let architecture = architecture_variants(base).iter().map(|(l, c)| row(l, c)).collect::<Result<Vec<_>>>()?;
    let loss = loss_variants(base).iter().map(|(l, c)| row(l, c)).collect::<Result<Vec<_>>>()?;
    Ok(AblationTables { architecture, loss })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldResult {
    pub repeat: usize,
    pub fold: usize,
    pub val_patients: Vec<String>,
    pub report: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSpread {
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation over folds and repeats.
    pub std: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CvResult {
    pub folds: Vec<FoldResult>,
    pub summary: Vec<MetricSpread>,
}

pub fn fold_metrics(r: &MetricReport) -> Vec<(&'static str, f64)> {
    let mut v = vec![("dice", r.mean_dice), ("iou", r.mean_iou), ("hd95", r.mean_hd95), ("accuracy", r.accuracy), ("precision", r.precision)];
    if let Some(e) = r.ef_error {
        v.push(("ef_error", e));
    }
    v
}

pub fn spread(folds: &[FoldResult]) -> Vec<MetricSpread> {
    let names: Vec<&str> = folds.first().map(|f| fold_metrics(&f.report).iter().map(|(n, _)| *n).collect()).unwrap_or_default();
    names
        .into_iter()
        .map(|name| {
            let vals: Vec<f64> =
                folds.iter().filter_map(|f| fold_metrics(&f.report).into_iter().find(|(n, _)| *n == name).map(|(_, v)| v)).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let std = if vals.len() > 1 { (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
            MetricSpread { metric: name.to_string(), mean, std }
        })
        .collect()
}

/// `repeats` × `k` patient-level folds; repeat `r` reshuffles with `seed + r`.
pub fn cross_validate(cfg: &RunConfig, ds: &Dataset, k: usize, repeats: usize, out_dir: Option<&Path>, threads: usize) -> Result<CvResult> {
    if repeats == 0 {
        return Err(Error::Config("cross-validation needs at least one repeat".into()));
    }
    let mut folds = Vec::new();
    for r in 0..repeats {
        let split = phantom::k_fold(&ds.meta.patients, k, cfg.seed.wrapping_add(r as u64))?;
        for (f, (tr_ids, va_ids)) in split.into_iter().enumerate() {
            log::info!("cv repeat {} fold {}", r + 1, f + 1);
            let tr: Vec<&SegSample> = ds.of_patients(&tr_ids).collect();
            let va: Vec<&SegSample> = ds.of_patients(&va_ids).collect();
            let res = train(cfg, &tr, &[], &TrainOptions { threads, ..Default::default() })?;
            let ev = evaluate(&res.store, cfg, &va, threads)?;
            if let Some(d) = out_dir {
                ev.write(&d.join(format!("repeat{}_fold{}", r + 1, f + 1)))?;
            }
            folds.push(FoldResult { repeat: r + 1, fold: f + 1, val_patients: va_ids, report: ev.report });
        }
    }
    let summary = spread(&folds);
    Ok(CvResult { folds, summary })
}

/// Ground-truth masks run through the metric pipeline, as a sanity fixture.
pub fn oracle_evaluation(cfg: &RunConfig, samples: &[&SegSample]) -> Result<Evaluation> {
    let pred: Vec<Mask> = samples.iter().map(|s| s.mask.clone()).collect();
    evaluate_masks(cfg, samples, &pred)
}
