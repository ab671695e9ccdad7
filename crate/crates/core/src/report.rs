//! Tables and CSV artefacts produced from runs.

use std::fmt::Write;

use serde_json::{json, Value};

use crate::train::{AblationRow, AblationTables, CvResult, EpochLog};

/// JSON Schema (draft 7) for `report.json`.
pub fn report_schema() -> Value {
    let num = json!({"type": "number"});
    let opt_num = json!({"type": ["number", "null"]});
    json!({
        "$schema": "http://json-schema.org/draft-07/schema#",
        "type": "object",
        "required": ["spacing_mm", "cases", "per_class", "mean_dice", "mean_iou", "mean_hd95", "accuracy",
                     "sensitivity", "specificity", "precision", "recall", "ef_error", "volume_error_ml", "summary"],
        "additionalProperties": false,
        "properties": {
            "spacing_mm": {"type": "number", "exclusiveMinimum": 0},
            "cases": {"type": "integer", "minimum": 1},
            "per_class": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["class", "dice", "iou", "hd95"],
                    "additionalProperties": false,
                    "properties": {
                        "class": {"type": "string"},
                        "dice": {"type": "number", "minimum": 0, "maximum": 1},
                        "iou": {"type": "number", "minimum": 0, "maximum": 1},
                        "hd95": {"type": "number", "minimum": 0},
                        "sensitivity": opt_num, "specificity": opt_num, "precision": opt_num, "recall": opt_num
                    }
                }
            },
            "mean_dice": {"type": "number", "minimum": 0, "maximum": 1},
            "mean_iou": {"type": "number", "minimum": 0, "maximum": 1},
            "mean_hd95": {"type": "number", "minimum": 0},
            "accuracy": num, "sensitivity": num, "specificity": num, "precision": num, "recall": num,
            "ef_error": opt_num,
            "volume_error_ml": opt_num,
            "summary": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["metric", "value", "unit", "ci"],
                    "additionalProperties": false,
                    "properties": {
                        "metric": {"type": "string"},
                        "value": num,
                        "unit": {"type": "string"},
                        "ci": {"oneOf": [{"type": "null"}, {"type": "array", "items": num, "minItems": 2, "maxItems": 2}]}
                    }
                }
            }
        }
    })
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or("-".into(), |v| format!("{v:.digits$}"))
}

fn table(title: &str, first: &str, rows: &[AblationRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(first.len());
    let mut s = format!("{title}\n{first:<width$}  Dice(%)  IoU(%)  HD95   EF err(%)  Precision(%)\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<width$}  {:>7}  {:>6}  {:>5.2}  {:>9}  {:>12}",
            r.label,
            pct(r.dice),
            pct(r.iou),
            r.hd95,
            opt(r.ef_error, 2),
            pct(r.precision)
        );
    }
    s
}

fn rows_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("row,dice,iou,hd95,ef_error,precision\n");
    for r in rows {
        let ef = r.ef_error.map_or(String::new(), |e| e.to_string());
        let _ = writeln!(s, "\"{}\",{},{},{},{},{}", r.label, r.dice, r.iou, r.hd95, ef, r.precision);
    }
    s
}

impl AblationTables {
    pub fn to_text(&self) -> String {
        format!(
            "{}\n{}",
            table("Architecture ablation", "Configuration", &self.architecture),
            table("Loss ablation", "Loss", &self.loss)
        )
    }

    pub fn architecture_csv(&self) -> String {
        rows_csv(&self.architecture)
    }

    pub fn loss_csv(&self) -> String {
        rows_csv(&self.loss)
    }
}

impl CvResult {
    pub fn to_text(&self) -> String {
        let mut s = format!("{} folds\n", self.folds.len());
        for m in &self.summary {
            let _ = writeln!(s, "{:<10} {:.4} ± {:.4}", m.metric, m.mean, m.std);
        }
        s
    }

    pub fn folds_csv(&self) -> String {
        let names: Vec<String> = self.summary.iter().map(|m| m.metric.clone()).collect();
        let mut s = format!("repeat,fold,{}\n", names.join(","));
        for f in &self.folds {
            let vals = crate::train::fold_metrics(&f.report);
            let cells: Vec<String> =
                names.iter().map(|n| vals.iter().find(|(k, _)| k == n).map_or(String::new(), |(_, v)| v.to_string())).collect();
            let _ = writeln!(s, "{},{},{}", f.repeat, f.fold, cells.join(","));
        }
        s
    }
}

pub fn loss_curves_csv(logs: &[EpochLog]) -> String {
    let mut s = String::from("epoch,step,lr_backbone,lr_decoder,dice,focal,boundary,struct,total,val_dice,val_hd95\n");
    for l in logs {
        let o = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            l.epoch,
            l.step,
            l.lr_backbone,
            l.lr_decoder,
            l.loss.dice,
            l.loss.focal,
            l.loss.boundary,
            l.loss.structural,
            l.loss.total,
            o(l.val_dice),
            o(l.val_hd95)
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(label: &str, dice: f64) -> AblationRow {
        AblationRow { label: label.into(), dice, iou: dice / (2.0 - dice), hd95: 1.5, ef_error: None, precision: 0.9 }
    }

    #[test]
    fn tables_render_every_row() {
        let t = AblationTables { architecture: vec![row("a", 0.9), row("+ b", 0.95)], loss: vec![row("L", 0.8)] };
        let text = t.to_text();
        assert!(text.contains("95.00") && text.contains("+ b") && text.contains("L "));
        assert_eq!(t.architecture_csv().lines().count(), 3);
        assert!(t.loss_csv().contains("\"L\",0.8,"));
    }
}
