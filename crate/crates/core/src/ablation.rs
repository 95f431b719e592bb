//! The four-row distillation ablation and its seed summaries.

use std::fmt::Write as _;

use crate::data::Dataset;
use crate::error::Result;
use crate::losses::DistillConfig;
use crate::nn::ModelConfig;
use crate::train::{evaluate_checkpoint, train_student, Checkpoint, TrainConfig, TrainOutcome};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AblationRow {
    pub name: &'static str,
    pub kd1: bool,
    pub kd2: bool,
    pub sigma: f64,
}

pub const ROWS: [AblationRow; 4] = [
    AblationRow { name: "baseline", kd1: false, kd2: false, sigma: 3.0 },
    AblationRow { name: "kd1", kd1: true, kd2: false, sigma: 3.0 },
    AblationRow { name: "kd1_kd2_sigma3", kd1: true, kd2: true, sigma: 3.0 },
    AblationRow { name: "kd1_kd2_sigma2", kd1: true, kd2: true, sigma: 2.0 },
];

impl AblationRow {
    /// `base` with this row's switches applied; everything else is kept.
    pub fn distill(&self, base: &DistillConfig) -> DistillConfig {
        DistillConfig {
            kd1_enabled: self.kd1,
            kd2_enabled: self.kd2,
            sigma: self.sigma,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub row: &'static str,
    pub seed: u64,
    pub test_top1: f64,
    pub outcome: TrainOutcome,
}

/// Train and test one (row, seed) cell. The student seed is `seed`.
pub fn run_cell(
    ds: &Dataset,
    teacher: &Checkpoint,
    model: &ModelConfig,
    train: &TrainConfig,
    base: &DistillConfig,
    row: &AblationRow,
    seed: u64,
) -> Result<CellResult> {
    let cfg = TrainConfig { seed, ..train.clone() };
    let outcome = train_student(ds, teacher, model, &cfg, &row.distill(base))?;
    let test_top1 = evaluate_checkpoint(&outcome.best, &ds.test)?;
    Ok(CellResult {
        row: row.name,
        seed,
        test_top1,
        outcome,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowSummary {
    pub row: String,
    pub runs: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
}

impl RowSummary {
    pub fn new(row: &str, runs: Vec<f64>) -> Self {
        let n = runs.len() as f64;
        let mean = runs.iter().sum::<f64>() / n;
        let std = if runs.len() > 1 {
            (runs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            row: row.to_string(),
            runs,
            mean,
            std,
        }
    }
}

/// One summary per row of [`ROWS`] that has results, in table order.
pub fn summarize(results: &[(String, f64)]) -> Vec<RowSummary> {
    ROWS.iter()
        .filter_map(|r| {
            let runs: Vec<f64> = results.iter().filter(|(n, _)| n == r.name).map(|(_, v)| *v).collect();
            (!runs.is_empty()).then(|| RowSummary::new(r.name, runs))
        })
        .collect()
}

/// baseline ≤ +KD1 ≤ +KD1+KD2 (σ=3) on the means.
pub fn is_monotone(summary: &[RowSummary]) -> Option<bool> {
    let m = |name: &str| summary.iter().find(|s| s.row == name).map(|s| s.mean);
    let (b, k1, k12) = (m("baseline")?, m("kd1")?, m("kd1_kd2_sigma3")?);
    Some(b <= k1 && k1 <= k12)
}

pub fn summary_csv(summary: &[RowSummary]) -> String {
    let mut s = String::from("config,runs,mean_top1,std_top1\n");
    for r in summary {
        writeln!(s, "{},{},{:.17e},{:.17e}", r.row, r.runs.len(), r.mean, r.std).unwrap();
    }
    s
}

pub fn summary_text(summary: &[RowSummary]) -> String {
    let mut s = format!("{:<16} {:>4}  {:>18}\n", "config", "runs", "test top-1 (%)");
    for r in summary {
        let cell = format!("{:.2} ± {:.2}", 100.0 * r.mean, 100.0 * r.std);
        writeln!(s, "{:<16} {:>4}  {:>18}", r.row, r.runs.len(), cell).unwrap();
    }
    if let Some(m) = is_monotone(summary) {
        writeln!(s, "monotone baseline <= kd1 <= kd1_kd2_sigma3: {m}").unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_switch_only_kd_and_sigma() {
        let base = DistillConfig { lambda2: 4.0, mixup_enabled: true, ..Default::default() };
        let d = ROWS[3].distill(&base);
        assert!(d.kd1_enabled && d.kd2_enabled && d.mixup_enabled);
        assert_eq!((d.sigma, d.lambda2), (2.0, 4.0));
        assert!(!ROWS[0].distill(&base).kd1_enabled);
    }

    #[test]
    fn summary_statistics() {
        let res: Vec<(String, f64)> = vec![
            ("kd1".into(), 0.5),
            ("baseline".into(), 0.2),
            ("baseline".into(), 0.4),
            ("kd1_kd2_sigma3".into(), 0.6),
        ];
        let s = summarize(&res);
        assert_eq!(s.iter().map(|r| r.row.as_str()).collect::<Vec<_>>(), ["baseline", "kd1", "kd1_kd2_sigma3"]);
        assert!((s[0].mean - 0.3).abs() < 1e-15);
        assert!((s[0].std - 0.02f64.sqrt()).abs() < 1e-15);
        assert_eq!(s[1].std, 0.0);
        assert_eq!(is_monotone(&s), Some(true));
        assert_eq!(summary_csv(&s).lines().count(), 4);
        assert!(summary_text(&s).contains("30.00 ± 14.14"));
    }

    #[test]
    fn monotone_needs_all_three_rows() {
        let s = summarize(&[("baseline".into(), 0.5), ("kd1".into(), 0.4)]);
        assert_eq!(is_monotone(&s), None);
    }
}
