//! Segmentation and clinical metrics.
//!
//! Classes absent from both prediction and ground truth score Dice/IoU 1 and
//! HD95 0; absent from exactly one they score 0 and the image diagonal.
//! Undefined ratios (zero denominators) are `None` and skipped by means.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{self, Mask};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub tn: Vec<u64>,
}

impl ConfusionCounts {
    pub fn new(classes: usize) -> Self {
        Self { tp: vec![0; classes], fp: vec![0; classes], fn_: vec![0; classes], tn: vec![0; classes] }
    }

    pub fn classes(&self) -> usize {
        self.tp.len()
    }

    pub fn total(&self, c: usize) -> u64 {
        self.tp[c] + self.fp[c] + self.fn_[c] + self.tn[c]
    }

    pub fn add(&mut self, o: &ConfusionCounts) {
        for c in 0..self.classes() {
            self.tp[c] += o.tp[c];
            self.fp[c] += o.fp[c];
            self.fn_[c] += o.fn_[c];
            self.tn[c] += o.tn[c];
        }
    }
}

pub fn confusion(pred: &Mask, gt: &Mask, classes: usize) -> Result<ConfusionCounts> {
    if (pred.h(), pred.w()) != (gt.h(), gt.w()) {
        return Err(Error::Shape(format!("pred {}×{} vs gt {}×{}", pred.h(), pred.w(), gt.h(), gt.w())));
    }
    let mut k = ConfusionCounts::new(classes);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p as usize, g as usize);
        if p >= classes || g >= classes {
            return Err(Error::Shape(format!("label {} out of range for {classes} classes", p.max(g))));
        }
        if p == g {
            k.tp[p] += 1;
        } else {
            k.fp[p] += 1;
            k.fn_[g] += 1;
        }
    }
    let n = (pred.h() * pred.w()) as u64;
    for c in 0..classes {
        k.tn[c] = n - k.tp[c] - k.fp[c] - k.fn_[c];
    }
    Ok(k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceIou {
    pub dice: Vec<f64>,
    pub iou: Vec<f64>,
    pub mean_dice: f64,
    pub mean_iou: f64,
}

/// Per-class Dice and IoU; means over the foreground classes `1..C`.
pub fn dice_iou(k: &ConfusionCounts) -> DiceIou {
    let mut dice = Vec::with_capacity(k.classes());
    let mut iou = Vec::with_capacity(k.classes());
    for c in 0..k.classes() {
        let (tp, fp, fn_) = (k.tp[c] as f64, k.fp[c] as f64, k.fn_[c] as f64);
        if tp + fp + fn_ == 0.0 {
            dice.push(1.0);
            iou.push(1.0);
        } else {
            dice.push(2.0 * tp / (2.0 * tp + fp + fn_));
            iou.push(tp / (tp + fp + fn_));
        }
    }
    let fg = (k.classes() - 1).max(1) as f64;
    let mean_dice = dice.iter().skip(1).sum::<f64>() / fg;
    let mean_iou = iou.iter().skip(1).sum::<f64>() / fg;
    DiceIou { dice, iou, mean_dice, mean_iou }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PixelStats {
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn pixel_stats(k: &ConfusionCounts) -> Vec<PixelStats> {
    (0..k.classes())
        .map(|c| {
            let (tp, fp, fn_, tn) = (k.tp[c], k.fp[c], k.fn_[c], k.tn[c]);
            PixelStats {
                accuracy: ratio(tp + tn, k.total(c)),
                sensitivity: ratio(tp, tp + fn_),
                specificity: ratio(tn, tn + fp),
                precision: ratio(tp, tp + fp),
                recall: ratio(tp, tp + fn_),
            }
        })
        .collect()
}

/// Fraction of pixels whose label is correct.
pub fn overall_accuracy(k: &ConfusionCounts) -> f64 {
    let correct: u64 = k.tp.iter().sum();
    correct as f64 / k.total(0) as f64
}

/// Mean of the defined values, `None` if there are none.
pub fn mean_defined(xs: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.into_iter().flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Percentile `q ∈ [0,1]` with linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Symmetric 95th-percentile boundary distance between two binary masks,
/// scaled by `spacing`.
pub fn hd95(pred: &[bool], gt: &[bool], h: usize, w: usize, spacing: f64) -> f64 {
    let bp = mask::inner_boundary(pred, h, w);
    let bg = mask::inner_boundary(gt, h, w);
    let (dp, dg) = (mask::edt(&bp, h, w), mask::edt(&bg, h, w));
    let (dp, dg) = match (dp, dg) {
        (None, None) => return 0.0,
        (Some(a), Some(b)) => (a, b),
        _ => return ((h * h + w * w) as f64).sqrt() * spacing,
    };
    let mut d = Vec::new();
    d.extend((0..h * w).filter(|&i| bp[i]).map(|i| dg[i]));
    d.extend((0..h * w).filter(|&i| bg[i]).map(|i| dp[i]));
    percentile(&d, 0.95) * spacing
}

pub fn hd95_class(pred: &Mask, gt: &Mask, class: u8, spacing: f64) -> f64 {
    hd95(&pred.binary(class), &gt.binary(class), gt.h(), gt.w(), spacing)
}

/// `100 (EDV − ESV) / EDV`.
pub fn ejection_fraction(edv_ml: f64, esv_ml: f64) -> Result<f64> {
    if !(edv_ml > 0.0) {
        return Err(Error::Config(format!("end-diastolic volume {edv_ml} must be positive")));
    }
    Ok(100.0 * (edv_ml - esv_ml) / edv_ml)
}

/// LV-cavity volume in ml summed over slices.
pub fn lv_volume_ml(slices: &[Mask], voxel_mm3: f64) -> f64 {
    slices.iter().map(|m| m.count(mask::LV)).sum::<usize>() as f64 * voxel_mm3 / 1000.0
}

pub fn ef_error(pred_ed: &[Mask], pred_es: &[Mask], gt_ed: &[Mask], gt_es: &[Mask], voxel_mm3: f64) -> Result<f64> {
    let ef_p = ejection_fraction(lv_volume_ml(pred_ed, voxel_mm3), lv_volume_ml(pred_es, voxel_mm3))?;
    let ef_g = ejection_fraction(lv_volume_ml(gt_ed, voxel_mm3), lv_volume_ml(gt_es, voxel_mm3))?;
    Ok((ef_p - ef_g).abs())
}

pub fn volume_error_ml(pred: &[Mask], gt: &[Mask], voxel_mm3: f64) -> f64 {
    (lv_volume_ml(pred, voxel_mm3) - lv_volume_ml(gt, voxel_mm3)).abs()
}

/// Percentile bootstrap interval of the mean.
pub fn bootstrap_ci(values: &[f64], n_resamples: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::Config(format!("bootstrap needs at least 2 cases, got {}", values.len())));
    }
    if n_resamples == 0 || !(level > 0.0 && level < 1.0) {
        return Err(Error::Config("bootstrap needs resamples > 0 and level in (0,1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let means: Vec<f64> = (0..n_resamples)
        .map(|_| (0..n).map(|_| values[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    let a = (1.0 - level) / 2.0;
    Ok((percentile(&means, a), percentile(&means, 1.0 - a)))
}

/// Whether a Dice/IoU pair reported in percent to two decimals can come
/// from one set of counts: some Dice inside the rounding interval maps to an
/// IoU inside the IoU rounding interval.
pub fn published_pair_consistent(dice_pct: f64, iou_pct: f64) -> bool {
    let iou = |d: f64| 100.0 * d / (2.0 - d);
    let lo = iou((dice_pct - 0.005) / 100.0);
    let hi = iou((dice_pct + 0.005) / 100.0);
    lo < iou_pct + 0.005 && hi > iou_pct - 0.005
}

/// Metrics of one predicted slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case: String,
    pub patient: String,
    pub phase: String,
    pub dice: Vec<f64>,
    pub iou: Vec<f64>,
    pub hd95: Vec<f64>,
    pub accuracy: f64,
    pub stats: Vec<PixelStats>,
}

impl CaseMetrics {
    pub fn compute(case: &str, patient: &str, phase: &str, pred: &Mask, gt: &Mask, classes: usize, spacing: f64) -> Result<Self> {
        let k = confusion(pred, gt, classes)?;
        let di = dice_iou(&k);
        Ok(Self {
            case: case.to_string(),
            patient: patient.to_string(),
            phase: phase.to_string(),
            hd95: (0..classes).map(|c| hd95_class(pred, gt, c as u8, spacing)).collect(),
            dice: di.dice,
            iou: di.iou,
            accuracy: overall_accuracy(&k),
            stats: pixel_stats(&k),
        })
    }

    pub fn mean_dice(&self) -> f64 {
        fg_mean(&self.dice)
    }

    pub fn mean_iou(&self) -> f64 {
        fg_mean(&self.iou)
    }

    pub fn mean_hd95(&self) -> f64 {
        fg_mean(&self.hd95)
    }
}

fn fg_mean(v: &[f64]) -> f64 {
    v.iter().skip(1).sum::<f64>() / (v.len() - 1).max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: String,
    pub dice: f64,
    pub iou: f64,
    pub hd95: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub metric: String,
    pub value: f64,
    pub unit: String,
    pub ci: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub spacing_mm: f64,
    pub cases: usize,
    pub per_class: Vec<ClassRow>,
    pub mean_dice: f64,
    pub mean_iou: f64,
    pub mean_hd95: f64,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub recall: f64,
    pub ef_error: Option<f64>,
    pub volume_error_ml: Option<f64>,
    pub summary: Vec<SummaryRow>,
}

pub const SUMMARY_ROWS: [&str; 8] = [
    "Dice Coefficient",
    "Pixel Accuracy",
    "IoU (Jaccard)",
    "Hausdorff Distance",
    "Sensitivity",
    "Specificity",
    "Precision",
    "Recall",
];

pub struct ReportOptions {
    pub class_names: Vec<String>,
    pub spacing_mm: f64,
    pub bootstrap: Option<(usize, f64, u64)>,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            class_names: mask::CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            spacing_mm: 1.0,
            bootstrap: Some((1000, 0.95, 0)),
        }
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Aggregate per-case metrics. Every mean is an average of per-case
/// values, so it can be recomputed from the per-case table.
pub fn build_report(cases: &[CaseMetrics], opts: &ReportOptions, ef_error: Option<f64>, volume_error_ml: Option<f64>) -> Result<MetricReport> {
    let first = cases.first().ok_or_else(|| Error::Config("no cases to report".into()))?;
    let classes = first.dice.len();
    let per_class: Vec<ClassRow> = (0..classes)
        .map(|c| ClassRow {
            class: opts.class_names.get(c).cloned().unwrap_or_else(|| format!("class{c}")),
            dice: mean(cases.iter().map(|k| k.dice[c])),
            iou: mean(cases.iter().map(|k| k.iou[c])),
            hd95: mean(cases.iter().map(|k| k.hd95[c])),
            sensitivity: mean_defined(cases.iter().map(|k| k.stats[c].sensitivity)),
            specificity: mean_defined(cases.iter().map(|k| k.stats[c].specificity)),
            precision: mean_defined(cases.iter().map(|k| k.stats[c].precision)),
            recall: mean_defined(cases.iter().map(|k| k.stats[c].recall)),
        })
        .collect();

    // case-level foreground means of each pixel statistic
    let case_stat = |k: &CaseMetrics, f: fn(&PixelStats) -> Option<f64>| mean_defined(k.stats.iter().skip(1).map(f));
    let per_case: [Vec<f64>; 8] = [
        cases.iter().map(CaseMetrics::mean_dice).collect(),
        cases.iter().map(|k| k.accuracy).collect(),
        cases.iter().map(CaseMetrics::mean_iou).collect(),
        cases.iter().map(CaseMetrics::mean_hd95).collect(),
        cases.iter().filter_map(|k| case_stat(k, |s| s.sensitivity)).collect(),
        cases.iter().filter_map(|k| case_stat(k, |s| s.specificity)).collect(),
        cases.iter().filter_map(|k| case_stat(k, |s| s.precision)).collect(),
        cases.iter().filter_map(|k| case_stat(k, |s| s.recall)).collect(),
    ];
    let units = ["%", "%", "%", "mm", "%", "%", "%", "%"];
    let summary = SUMMARY_ROWS
        .iter()
        .zip(&per_case)
        .zip(units)
        .map(|((name, vals), unit)| {
            let ci = match opts.bootstrap {
                Some((n, level, seed)) if vals.len() >= 2 => Some(bootstrap_ci(vals, n, level, seed)?),
                _ => None,
            };
            Ok(SummaryRow { metric: name.to_string(), value: mean(vals.iter().copied()), unit: unit.to_string(), ci })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(MetricReport {
        spacing_mm: opts.spacing_mm,
        cases: cases.len(),
        per_class,
        mean_dice: summary[0].value,
        accuracy: summary[1].value,
        mean_iou: summary[2].value,
        mean_hd95: summary[3].value,
        sensitivity: summary[4].value,
        specificity: summary[5].value,
        precision: summary[6].value,
        recall: summary[7].value,
        ef_error,
        volume_error_ml,
        summary,
    })
}

impl MetricReport {
    /// Aligned-column performance summary.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<20} {:>10}   {}\n", "Metric", "Score", "95% CI"));
        for r in &self.summary {
            let (v, ci) = if r.unit == "%" {
                (format!("{:.2}%", 100.0 * r.value), r.ci.map(|(a, b)| format!("[{:.1}, {:.1}]", 100.0 * a, 100.0 * b)))
            } else {
                (format!("{:.2} {}", r.value, r.unit), r.ci.map(|(a, b)| format!("[{a:.2}, {b:.2}]")))
            };
            out.push_str(&format!("{:<20} {:>10}   {}\n", r.metric, v, ci.unwrap_or_else(|| "-".into())));
        }
        out.push('\n');
        out.push_str(&format!("{:<6} {:>7} {:>7} {:>8}\n", "Class", "Dice", "IoU", "HD95"));
        for c in &self.per_class {
            out.push_str(&format!("{:<6} {:>7.4} {:>7.4} {:>8.3}\n", c.class, c.dice, c.iou, c.hd95));
        }
        if let Some(e) = self.ef_error {
            out.push_str(&format!("\nEF error: {e:.2}%\n"));
        }
        if let Some(v) = self.volume_error_ml {
            out.push_str(&format!("LV volume error: {v:.3} ml\n"));
        }
        out
    }
}

/// One row per case: identifiers, then per-class Dice, IoU and HD95.
pub fn cases_csv(cases: &[CaseMetrics], class_names: &[String]) -> String {
    let mut out = String::from("case,patient,phase,mean_dice,mean_iou,mean_hd95,accuracy");
    for m in ["dice", "iou", "hd95"] {
        for n in class_names {
            out.push_str(&format!(",{m}_{n}"));
        }
    }
    out.push('\n');
    for k in cases {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}",
            k.case,
            k.patient,
            k.phase,
            k.mean_dice(),
            k.mean_iou(),
            k.mean_hd95(),
            k.accuracy
        ));
        for v in k.dice.iter().chain(&k.iou).chain(&k.hd95) {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};

    fn random_mask(h: usize, w: usize, classes: u8, rng: &mut ChaCha8Rng) -> Mask {
        Mask::new(h, w, (0..h * w).map(|_| rng.gen_range(0..classes)).collect()).unwrap()
    }

    #[test]
    fn confusion_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let p = random_mask(8, 8, 4, &mut rng);
            let g = random_mask(8, 8, 4, &mut rng);
            let k = confusion(&p, &g, 4).unwrap();
            for c in 0..4u8 {
                let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
                for i in 0..64 {
                    match (p.data()[i] == c, g.data()[i] == c) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_ += 1,
                        (false, false) => tn += 1,
                    }
                }
                let c = c as usize;
                assert_eq!((k.tp[c], k.fp[c], k.fn_[c], k.tn[c]), (tp, fp, fn_, tn));
                assert_eq!(k.total(c), 64);
            }
        }
        let bad = Mask::new(1, 2, vec![0, 5]).unwrap();
        assert!(confusion(&bad, &bad, 4).is_err());
    }

    #[test]
    fn confusion_identity_and_complement() {
        let m = Mask::new(2, 3, vec![0, 1, 1, 0, 1, 0]).unwrap();
        let k = confusion(&m, &m, 2).unwrap();
        assert!(k.fp.iter().chain(&k.fn_).all(|&v| v == 0));
        let inv = Mask::new(2, 3, m.data().iter().map(|&v| 1 - v).collect()).unwrap();
        let k = confusion(&inv, &m, 2).unwrap();
        assert!(k.tp.iter().chain(&k.tn).all(|&v| v == 0));
    }

    #[test]
    fn dice_iou_examples() {
        let m = Mask::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        let d = dice_iou(&confusion(&m, &m, 4).unwrap());
        assert!(d.dice.iter().chain(&d.iou).all(|&v| v == 1.0));

        // two 2-pixel segments sharing one pixel
        let p = Mask::new(1, 3, vec![1, 1, 0]).unwrap();
        let g = Mask::new(1, 3, vec![0, 1, 1]).unwrap();
        let k = confusion(&p, &g, 2).unwrap();
        assert_eq!((k.tp[1], k.fp[1], k.fn_[1]), (1, 1, 1));
        let d = dice_iou(&k);
        assert_eq!(d.dice[1], 0.5);
        assert!((d.iou[1] - 1.0 / 3.0).abs() < 1e-15);

        assert!(published_pair_consistent(93.39, 87.61));
        assert!(!published_pair_consistent(93.39, 87.70));
    }

    #[test]
    fn absent_class_conventions() {
        let p = Mask::new(1, 3, vec![0, 0, 1]).unwrap();
        let g = Mask::new(1, 3, vec![0, 0, 2]).unwrap();
        let d = dice_iou(&confusion(&p, &g, 4).unwrap());
        assert_eq!(d.dice[3], 1.0);
        assert_eq!(d.dice[1], 0.0);
        assert_eq!(hd95_class(&p, &g, 3, 1.0), 0.0);
        assert_eq!(hd95_class(&p, &g, 1, 2.0), 2.0 * 10f64.sqrt());
    }

    proptest! {
        #[test]
        fn iou_dice_relation(tp in 0u64..500, fp in 0u64..500, fn_ in 0u64..500) {
            let k = ConfusionCounts { tp: vec![0, tp], fp: vec![0, fp], fn_: vec![0, fn_], tn: vec![0, 0] };
            let d = dice_iou(&k);
            prop_assert!((d.iou[1] - d.dice[1] / (2.0 - d.dice[1])).abs() < 1e-9);
        }
    }

    #[test]
    fn pixel_stat_examples() {
        let k = ConfusionCounts { tp: vec![8], fp: vec![2], fn_: vec![2], tn: vec![88] };
        let s = pixel_stats(&k)[0];
        assert_eq!(s.precision, Some(0.8));
        assert_eq!(s.recall, Some(0.8));
        assert_eq!(s.accuracy, Some(0.96));

        let m = Mask::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        let all_bg = Mask::zeros(2, 2);
        let s = pixel_stats(&confusion(&all_bg, &m, 2).unwrap())[1];
        assert_eq!(s.sensitivity, Some(0.0));
        assert_eq!(s.specificity, Some(1.0));
        assert_eq!(s.precision, None);
        assert_eq!(mean_defined([s.precision, Some(0.5)]), Some(0.5));

        let s = pixel_stats(&confusion(&m, &m, 2).unwrap());
        for st in s {
            for v in [st.accuracy, st.sensitivity, st.specificity, st.precision, st.recall] {
                assert_eq!(v, Some(1.0));
            }
        }
    }

    fn brute_hd95(p: &[bool], g: &[bool], h: usize, w: usize) -> f64 {
        let bp = mask::inner_boundary(p, h, w);
        let bg = mask::inner_boundary(g, h, w);
        let pts = |b: &[bool]| -> Vec<(f64, f64)> {
            (0..h * w).filter(|&i| b[i]).map(|i| ((i / w) as f64, (i % w) as f64)).collect()
        };
        let (a, b) = (pts(&bp), pts(&bg));
        if a.is_empty() && b.is_empty() {
            return 0.0;
        }
        if a.is_empty() || b.is_empty() {
            return ((h * h + w * w) as f64).sqrt();
        }
        let directed = |x: &[(f64, f64)], y: &[(f64, f64)]| -> Vec<f64> {
            x.iter()
                .map(|p| y.iter().map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()).fold(f64::INFINITY, f64::min))
                .collect()
        };
        let mut d = directed(&a, &b);
        d.extend(directed(&b, &a));
        d.sort_by(f64::total_cmp);
        let pos = 0.95 * (d.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        d[lo] + (d[hi] - d[lo]) * (pos - lo as f64)
    }

    #[test]
    fn hd95_square_shift_and_spacing() {
        let sq = |oy: usize, ox: usize| -> Vec<bool> {
            (0..100).map(|i| (oy..oy + 4).contains(&(i / 10)) && (ox..ox + 4).contains(&(i % 10))).collect()
        };
        let (a, b) = (sq(3, 3), sq(3, 4));
        let v = hd95(&a, &b, 10, 10, 1.0);
        assert_eq!(v, brute_hd95(&a, &b, 10, 10));
        assert_eq!(hd95(&a, &b, 10, 10, 2.0), 2.0 * v);
        assert_eq!(hd95(&a, &a, 10, 10, 1.0), 0.0);
        assert_eq!(hd95(&b, &a, 10, 10, 1.0), v);
    }

    #[test]
    fn hd95_random_pairs_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let (h, w) = (rng.gen_range(2..20), rng.gen_range(2..20));
            let p: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.4)).collect();
            let g: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.4)).collect();
            assert_eq!(hd95(&p, &g, h, w, 1.0), brute_hd95(&p, &g, h, w));
            assert_eq!(hd95(&p, &g, h, w, 1.0), hd95(&g, &p, h, w, 1.0));
        }
    }

    #[test]
    fn ejection_fraction_and_volumes() {
        assert_eq!(ejection_fraction(120.0, 60.0).unwrap(), 50.0);
        assert!(ejection_fraction(0.0, 1.0).is_err());
        let lv = |n: usize| {
            let mut m = Mask::zeros(40, 40);
            for i in 0..n {
                m.set(i / 40, i % 40, mask::LV);
            }
            m
        };
        // 1000 vs 1100 LV voxels split over two slices each
        let pred = [lv(500), lv(500)];
        let gt = [lv(600), lv(500)];
        assert!((volume_error_ml(&pred, &gt, 1.0) - 0.1).abs() < 1e-12);
        assert!((volume_error_ml(&pred, &gt, 2.0) - 0.2).abs() < 1e-12);
        let es = [lv(300), lv(200)];
        assert_eq!(ef_error(&gt, &es, &gt, &es, 1.0).unwrap(), 0.0);
        let want = (100.0 * (1.0 - 0.5) - 100.0 * (1.1f64 - 0.5) / 1.1).abs();
        assert!((ef_error(&pred, &es, &gt, &es, 1.0).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_properties_and_trace() {
        assert_eq!(bootstrap_ci(&[0.7; 5], 200, 0.95, 1).unwrap(), (0.7, 0.7));
        assert!(bootstrap_ci(&[1.0], 10, 0.95, 0).is_err());
        assert!(bootstrap_ci(&[], 10, 0.95, 0).is_err());
        let vals = [0.81, 0.92, 0.77, 0.95, 0.88, 0.69, 0.91, 0.85, 0.79, 0.93];
        let (lo, hi) = bootstrap_ci(&vals, 500, 0.95, 42).unwrap();
        assert!(lo <= hi && lo >= 0.69 && hi <= 0.95);

        // reference trace: resample with the same stream by hand
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut means: Vec<f64> =
            (0..500).map(|_| (0..10).map(|_| vals[rng.gen_range(0..10)]).sum::<f64>() / 10.0).collect();
        means.sort_by(f64::total_cmp);
        let at = |q: f64| {
            let pos = q * 499.0;
            let i = pos.floor() as usize;
            means[i] + (means[i + 1] - means[i]) * (pos - i as f64)
        };
        assert_eq!((lo, hi), (at(0.025), at(0.975)));
        assert_eq!(bootstrap_ci(&vals, 500, 0.95, 42).unwrap(), (lo, hi));
    }

    #[test]
    fn report_means_match_case_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cases: Vec<CaseMetrics> = (0..6)
            .map(|i| {
                let g = random_mask(8, 8, 4, &mut rng);
                let mut p = g.clone();
                for _ in 0..10 {
                    p.set(rng.gen_range(0..8), rng.gen_range(0..8), rng.gen_range(0..4));
                }
                CaseMetrics::compute(&format!("c{i}"), "p", "ED", &p, &g, 4, 1.5).unwrap()
            })
            .collect();
        let rep = build_report(&cases, &ReportOptions::default(), Some(1.0), None).unwrap();
        let csv = cases_csv(&cases, &rep.per_class.iter().map(|c| c.class.clone()).collect::<Vec<_>>());
        let col: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(3).unwrap().parse().unwrap()).collect();
        assert!((rep.mean_dice - col.iter().sum::<f64>() / col.len() as f64).abs() < 1e-9);
        assert_eq!(rep.summary.len(), 8);
        let text = rep.to_text();
        for row in SUMMARY_ROWS {
            assert!(text.contains(row), "{row}");
        }
    }

    #[test]
    fn perfect_report() {
        let g = Mask::new(3, 3, vec![0, 1, 2, 3, 3, 2, 1, 0, 0]).unwrap();
        let cases: Vec<CaseMetrics> =
            (0..3).map(|i| CaseMetrics::compute(&i.to_string(), "p", "ES", &g, &g, 4, 1.0).unwrap()).collect();
        let rep = build_report(&cases, &ReportOptions::default(), None, None).unwrap();
        assert_eq!((rep.mean_dice, rep.mean_iou, rep.accuracy, rep.mean_hd95), (1.0, 1.0, 1.0, 0.0));
    }
}
