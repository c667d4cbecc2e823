//! Ablation sweeps over one factor at a time, sharing data, teacher and
//! seeds across settings.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::info;

use crate::config::{AttentionVariant, ExperimentConfig};
use crate::metrics::{append_rows, MetricsRow};
use crate::train::{distill_student, Prepared, RunKind};
use crate::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Attention,
    Heads,
    Aux,
    Lambda,
    Cascade,
    Inherit,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Attention => "attention",
            Ablation::Heads => "heads",
            Ablation::Aux => "aux",
            Ablation::Lambda => "lambda",
            Ablation::Cascade => "cascade",
            Ablation::Inherit => "inherit",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self> {
        [Self::Attention, Self::Heads, Self::Aux, Self::Lambda, Self::Cascade, Self::Inherit]
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown ablation `{s}`")))
    }
}

/// One setting of a sweep: a label, the config it runs and the loop kind.
#[derive(Clone, Debug)]
pub struct Setting {
    pub label: String,
    pub cfg: ExperimentConfig,
    pub kind: RunKind,
}

pub fn settings(ablation: Ablation, base: &ExperimentConfig) -> Vec<Setting> {
    let with = |label: String, f: &dyn Fn(&mut ExperimentConfig)| {
        let mut cfg = base.clone();
        f(&mut cfg);
        Setting { label, cfg, kind: RunKind::Distill }
    };
    match ablation {
        Ablation::Attention => {
            AttentionVariant::ALL.into_iter().map(|v| with(v.to_string(), &|c| c.attention = v)).collect()
        }
        Ablation::Heads => [1, 4, 8].into_iter().map(|m| with(format!("M{m}"), &|c| c.heads = m)).collect(),
        Ablation::Aux => [("identification", true, false), ("localization", false, true), ("both", true, true)]
            .into_iter()
            .map(|(l, i, r)| {
                with(l.to_string(), &|c| {
                    c.aux_identification = i;
                    c.aux_localization = r;
                })
            })
            .collect(),
        Ablation::Lambda => {
            [2.0, 6.0, 12.0].into_iter().map(|l| with(format!("lambda{l}"), &|c| c.lambda = l)).collect()
        }
        Ablation::Cascade => [1, 2, 4].into_iter().map(|d| with(format!("depth{d}"), &|c| c.depth = d)).collect(),
        Ablation::Inherit => {
            let mut v = vec![Setting { label: "baseline".into(), cfg: base.clone(), kind: RunKind::Baseline }];
            v.push(with("distill".into(), &|c| c.inherit = false));
            v.push(with("distill_inherit".into(), &|c| c.inherit = true));
            v
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub ablation: String,
    pub setting: String,
    pub seed: u64,
    pub toy_ap: f64,
}

pub const ABLATION_HEADER: &str = "ablation,setting,seed,toy_ap";

impl AblationRow {
    pub fn to_csv(&self) -> String {
        format!("{},{},{},{:.9}", self.ablation, self.setting, self.seed, self.toy_ap)
    }
}

pub struct AblationResult {
    pub rows: Vec<AblationRow>,
    pub metrics: Vec<MetricsRow>,
}

impl AblationResult {
    /// Mean AP per setting, in sweep order.
    pub fn means(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64, usize)> = Vec::new();
        for r in &self.rows {
            match out.iter_mut().find(|(s, _, _)| *s == r.setting) {
                Some(e) => {
                    e.1 += r.toy_ap;
                    e.2 += 1;
                }
                None => out.push((r.setting.clone(), r.toy_ap, 1)),
            }
        }
        out.into_iter().map(|(s, t, n)| (s, t / n as f64)).collect()
    }

    pub fn mean_of(&self, setting: &str) -> Option<f64> {
        self.means().into_iter().find(|(s, _)| s == setting).map(|(_, m)| m)
    }

    pub fn csv(&self) -> String {
        let mut s = String::from(ABLATION_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.to_csv());
            s.push('\n');
        }
        s
    }
}

/// Runs every setting for every seed. All settings of one seed share the
/// data, the teacher and the random streams.
pub fn run_ablation(
    ablation: Ablation,
    base: &ExperimentConfig,
    prep: &Prepared,
    seeds: &[u64],
) -> Result<AblationResult> {
    let mut rows = Vec::new();
    let mut metrics = Vec::new();
    for &seed in seeds {
        for s in settings(ablation, base) {
            let cfg = ExperimentConfig { seed, ..s.cfg };
            let name = format!("{ablation}-{}-s{seed}", s.label);
            let run = distill_student(&cfg, &prep.data, &prep.teacher.detector, &prep.cache, s.kind, &name)?;
            info!("{name}: {:.4}", run.toy_ap);
            rows.push(AblationRow { ablation: ablation.to_string(), setting: s.label, seed, toy_ap: run.toy_ap });
            metrics.extend(run.rows);
        }
    }
    Ok(AblationResult { rows, metrics })
}

pub fn write_results(dir: &Path, ablation: Ablation, result: &AblationResult) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let path = dir.join(format!("ablate_{ablation}.csv"));
    std::fs::write(&path, result.csv()).map_err(|e| HarnessError::io(&path, e))?;
    append_rows(&dir.join("metrics.csv"), &result.metrics)
}
