//! One-axis hyperparameter sweeps and the four-arm component ablation.
//!
//! Every value (or arm) runs generation and evaluation with all other
//! settings and seeds fixed. Trained models are shared through the stage
//! cache, so only stages downstream of the changed field are recomputed.

use crate::config::RunConfig;
use crate::plot;
use crate::stages::{Pipeline, StageReport};
use crate::store::{write_json, Store};
use crate::PipelineError;
use riskydiff_core::riskygen::GuidanceConfig;
use riskydiff_core::seed;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    S,
    Lambda,
    /// Fraction of the validation split behind the statistics and the
    /// error predictor.
    ValFraction,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::S => "s",
            SweepAxis::Lambda => "lambda",
            SweepAxis::ValFraction => "val_fraction",
        }
    }

    pub fn apply(self, cfg: &mut RunConfig, value: f64) {
        match self {
            SweepAxis::S => cfg.guidance.s = value,
            SweepAxis::Lambda => cfg.guidance.lambda = value,
            SweepAxis::ValFraction => cfg.generation.val_fraction = value,
        }
    }
}

impl FromStr for SweepAxis {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "s" => Ok(SweepAxis::S),
            "lambda" => Ok(SweepAxis::Lambda),
            "val_fraction" => Ok(SweepAxis::ValFraction),
            other => Err(PipelineError::UnknownAxis(other.to_string())),
        }
    }
}

/// Headline metrics of one generation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmMetrics {
    pub arm: String,
    pub config_hash: String,
    pub error_rate: f64,
    pub conformity_rate: f64,
    pub frechet_distance: f64,
    pub screen_fallbacks: usize,
}

impl ArmMetrics {
    fn of(r: &StageReport) -> Self {
        Self {
            arm: r.arm.clone(),
            config_hash: r.config_hash.clone(),
            error_rate: r.evaluation.error_rate,
            conformity_rate: r.evaluation.conformity_rate,
            frechet_distance: r.evaluation.frechet_distance,
            screen_fallbacks: r.evaluation.screen_fallbacks,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub metrics: ArmMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    /// The swept config before any value was applied.
    pub config: serde_json::Value,
}

impl SweepTable {
    pub fn column(&self, f: impl Fn(&ArmMetrics) -> f64) -> Vec<f64> {
        self.rows.iter().map(|r| f(&r.metrics)).collect()
    }
}

fn metrics_header(first: &str) -> [&str; 7] {
    [
        first,
        "arm",
        "error_rate",
        "conformity_rate",
        "frechet_distance",
        "screen_fallbacks",
        "config_hash",
    ]
}

fn metrics_record(first: String, m: &ArmMetrics) -> [String; 7] {
    [
        first,
        m.arm.clone(),
        m.error_rate.to_string(),
        m.conformity_rate.to_string(),
        m.frechet_distance.to_string(),
        m.screen_fallbacks.to_string(),
        m.config_hash.clone(),
    ]
}

fn output_tag(cfg: &RunConfig, what: &str) -> String {
    let h = seed::hash_hex(format!("{}/{what}", cfg.hash()).as_bytes());
    h[..16].to_string()
}

/// Generation plus evaluation of one config; returns the report.
fn evaluate_config(cfg: RunConfig, store: &Store) -> Result<StageReport, PipelineError> {
    let mut p = Pipeline::new(cfg, store)?;
    p.recording(|p| {
        let trained = p.train()?;
        let samples = p.generate(&trained)?;
        p.evaluate(&trained, &samples)
    })
}

/// Runs `cfg` once per value of `axis`. Writes
/// `reports/sweep-<axis>-<tag>.{csv,json}` and a line chart.
pub fn sweep(
    cfg: &RunConfig,
    root: &Path,
    axis: SweepAxis,
    values: &[f64],
    resume: bool,
) -> Result<SweepTable, PipelineError> {
    if values.is_empty()
        || values.iter().any(|v| !v.is_finite())
        || values.windows(2).any(|w| w[0] > w[1])
    {
        return Err(PipelineError::UnsortedValues);
    }
    cfg.validate()?;
    let store = Store::new(root, resume)?;
    let mut rows = Vec::new();
    for &value in values {
        let mut c = cfg.clone();
        axis.apply(&mut c, value);
        let report = evaluate_config(c, &store)?;
        rows.push(SweepRow {
            value,
            metrics: ArmMetrics::of(&report),
        });
    }
    let table = SweepTable {
        axis,
        rows,
        config: cfg.snapshot(),
    };
    let values_text: Vec<String> = values.iter().map(|v| v.to_string()).collect();
    let tag = output_tag(cfg, &format!("sweep/{}/{}", axis.name(), values_text.join(",")));
    let stem = format!("sweep-{}-{tag}", axis.name());
    let mut w = csv::Writer::from_path(store.report_path(&format!("{stem}.csv")))?;
    w.write_record(metrics_header(axis.name()))?;
    for r in &table.rows {
        w.write_record(metrics_record(r.value.to_string(), &r.metrics))?;
    }
    w.flush()?;
    plot::line_chart(
        &store.plot_path(&format!("{stem}.png")),
        &format!("sweep over {}", axis.name()),
        axis.name(),
        values,
        &[
            ("error rate", table.column(|m| m.error_rate)),
            ("conformity", table.column(|m| m.conformity_rate)),
            ("Frechet distance", table.column(|m| m.frechet_distance)),
        ],
    )?;
    write_json(&store.report_path(&format!("{stem}.json")), &table)?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub guidance: GuidanceConfig,
    pub metrics: ArmMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    /// Base, +Screening, +Gradient, +Both.
    pub arms: Vec<AblationArm>,
    pub config: serde_json::Value,
}

impl AblationReport {
    pub fn arm(&self, name: &str) -> Option<&ArmMetrics> {
        self.arms.iter().map(|a| &a.metrics).find(|m| m.arm == name)
    }
}

/// The four component arms of `g`. Gradient arms keep `g.s` and `g.lambda`;
/// the others switch both off.
pub fn ablation_arms(g: &GuidanceConfig) -> [GuidanceConfig; 4] {
    let off = GuidanceConfig {
        s: 0.0,
        lambda: 0.0,
        screening: false,
        ..g.clone()
    };
    [
        off.clone(),
        GuidanceConfig {
            screening: true,
            ..off
        },
        GuidanceConfig {
            screening: false,
            ..g.clone()
        },
        GuidanceConfig {
            screening: true,
            ..g.clone()
        },
    ]
}

/// Runs the four arms with shared seeds. Writes
/// `reports/ablation-<tag>.{csv,json}` and a bar chart.
pub fn ablate(cfg: &RunConfig, root: &Path, resume: bool) -> Result<AblationReport, PipelineError> {
    cfg.validate()?;
    let store = Store::new(root, resume)?;
    let mut arms = Vec::new();
    for guidance in ablation_arms(&cfg.guidance) {
        let c = RunConfig {
            guidance: guidance.clone(),
            ..cfg.clone()
        };
        let report = evaluate_config(c, &store)?;
        arms.push(AblationArm {
            guidance,
            metrics: ArmMetrics::of(&report),
        });
    }
    let report = AblationReport {
        arms,
        config: cfg.snapshot(),
    };
    let stem = format!("ablation-{}", output_tag(cfg, "ablation"));
    let mut w = csv::Writer::from_path(store.report_path(&format!("{stem}.csv")))?;
    w.write_record(metrics_header("s").iter().chain(&["lambda", "screening"]))?;
    for a in &report.arms {
        let rec = metrics_record(a.guidance.s.to_string(), &a.metrics);
        w.write_record(rec.iter().map(String::as_str).chain([
            a.guidance.lambda.to_string().as_str(),
            if a.guidance.screening { "true" } else { "false" },
        ]))?;
    }
    w.flush()?;
    plot::bar_chart(
        &store.plot_path(&format!("{stem}.png")),
        "component ablation",
        &report.arms.iter().map(|a| a.metrics.arm.clone()).collect::<Vec<_>>(),
        &[
            ("error rate", report.arms.iter().map(|a| a.metrics.error_rate).collect()),
            ("conformity", report.arms.iter().map(|a| a.metrics.conformity_rate).collect()),
        ],
    )?;
    write_json(&store.report_path(&format!("{stem}.json")), &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stages::arm_label;

    #[test]
    fn axis_parsing() {
        assert_eq!("lambda".parse::<SweepAxis>().unwrap(), SweepAxis::Lambda);
        assert!(matches!(
            "temperature".parse::<SweepAxis>(),
            Err(PipelineError::UnknownAxis(a)) if a == "temperature"
        ));
    }

    #[test]
    fn unsorted_values_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        for bad in [&[][..], &[1.0, 0.0], &[f64::NAN]] {
            assert!(matches!(
                sweep(&cfg, dir.path(), SweepAxis::S, bad, false),
                Err(PipelineError::UnsortedValues)
            ));
        }
    }

    #[test]
    fn arms_cover_all_four_labels() {
        let labels: Vec<_> = ablation_arms(&GuidanceConfig::default())
            .iter()
            .map(arm_label)
            .collect();
        assert_eq!(labels, ["Base", "+Screening", "+Gradient", "+Both"]);
    }
}
