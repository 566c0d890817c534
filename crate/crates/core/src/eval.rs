//! Trial campaigns, summary statistics and report export.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::render::{item_rng, Camera};
use crate::sim::{ArmModel, ReachAction, SceneState, SimError, HORIZON};

pub const DEFAULT_TRIALS: usize = 400;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("campaign needs at least one trial")]
    NoTrials,
    #[error("no successful trial reports to summarize")]
    NoReports,
    #[error("task sampling failed for trial {trial}: {source}")]
    Task {
        trial: usize,
        #[source]
        source: SimError,
    },
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("report parse error in {path}: {message}")]
    Parse { path: String, message: String },
}

impl EvalError {
    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        EvalError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }

    fn parse(path: &Path, e: impl std::fmt::Display) -> Self {
        EvalError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }
}

/// One rollout. `trace[k]` is the distance after step `k + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial_id: usize,
    pub initial_distance: f64,
    pub final_distance: f64,
    /// Mean per-step reward over the horizon, in [0, 1].
    pub acc_reward: f64,
    pub trace: Vec<f64>,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Campaign {
    pub reports: Vec<TrialReport>,
}

impl Campaign {
    pub fn failures(&self) -> usize {
        self.reports.iter().filter(|r| r.failure.is_some()).count()
    }
}

/// Task for trial `trial` of a campaign seeded with `seed`; identical for
/// every policy evaluated under that seed.
pub fn campaign_task(arm: &ArmModel, camera: &Camera, seed: u64, trial: usize) -> Result<SceneState, EvalError> {
    let mut rng = item_rng(seed ^ 0x7452_4941_4c53, trial as u64);
    arm.sample_task(&mut rng, &camera.viewport)
        .map_err(|source| EvalError::Task { trial, source })
}

/// Rolls `policy` out for `HORIZON` steps on each of `n` tasks. A policy
/// error ends that trial early and marks it failed.
pub fn run_campaign<P>(arm: &ArmModel, camera: &Camera, mut policy: P, n: usize, seed: u64) -> Result<Campaign, EvalError>
where
    P: FnMut(&SceneState) -> Result<ReachAction, SimError>,
{
    if n == 0 {
        return Err(EvalError::NoTrials);
    }
    let mut reports = Vec::with_capacity(n);
    for trial in 0..n {
        let task = campaign_task(arm, camera, seed, trial)?;
        reports.push(run_trial(arm, &mut policy, trial, task));
    }
    Ok(Campaign { reports })
}

fn run_trial<P>(arm: &ArmModel, policy: &mut P, trial_id: usize, task: SceneState) -> TrialReport
where
    P: FnMut(&SceneState) -> Result<ReachAction, SimError>,
{
    let initial_distance = arm.distance(&task);
    let mut state = task;
    let mut trace = Vec::with_capacity(HORIZON);
    let mut reward = 0.0;
    let mut failure = None;
    for _ in 0..HORIZON {
        match policy(&state) {
            Ok(a) => {
                state = arm.apply_action(&state, a);
                reward += arm.reward(&state);
                trace.push(arm.distance(&state));
            }
            Err(e) => {
                failure = Some(e.to_string());
                break;
            }
        }
    }
    TrialReport {
        trial_id,
        initial_distance,
        final_distance: trace.last().copied().unwrap_or(initial_distance),
        acc_reward: reward / HORIZON as f64,
        trace,
        failure,
    }
}

/// Uniformly random policy over the canonical actions.
pub fn random_policy<R: Rng>(mut rng: R) -> impl FnMut(&SceneState) -> Result<ReachAction, SimError> {
    move |_| Ok(ReachAction::ALL[rng.random_range(0..ReachAction::ALL.len())])
}

/// Box-plot statistics of final distance plus mean reward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub n: usize,
    pub n_failed: usize,
    pub d_min_cm: f64,
    pub d_q1_cm: f64,
    pub d_med_cm: f64,
    pub d_q3_cm: f64,
    pub d_max_cm: f64,
    pub whisker_lo_cm: f64,
    pub whisker_hi_cm: f64,
    pub d_med_px: f64,
    pub d_q3_px: f64,
    pub rbar: f64,
    /// Trial ids beyond 1.5 × IQR from the quartiles.
    pub outliers: Vec<usize>,
}

/// Linear-interpolation quantile (R type 7) of ascending `sorted`.
pub fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Statistics over successful trials; failed trials are only counted.
pub fn summarize(reports: &[TrialReport], camera: &Camera) -> Result<CampaignSummary, EvalError> {
    let ok: Vec<&TrialReport> = reports.iter().filter(|r| r.failure.is_none()).collect();
    if ok.is_empty() {
        return Err(EvalError::NoReports);
    }
    let mut d: Vec<f64> = ok.iter().map(|r| r.final_distance * 100.0).collect();
    d.sort_by(f64::total_cmp);
    let q1 = quantile_type7(&d, 0.25);
    let med = quantile_type7(&d, 0.5);
    let q3 = quantile_type7(&d, 0.75);
    let iqr = q3 - q1;
    let (fence_lo, fence_hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside = || d.iter().copied().filter(|v| (fence_lo..=fence_hi).contains(v));
    let outliers = ok
        .iter()
        .filter(|r| {
            let v = r.final_distance * 100.0;
            v < fence_lo || v > fence_hi
        })
        .map(|r| r.trial_id)
        .collect();
    let px = camera.px_per_cm();
    Ok(CampaignSummary {
        n: reports.len(),
        n_failed: reports.len() - ok.len(),
        d_min_cm: d[0],
        d_q1_cm: q1,
        d_med_cm: med,
        d_q3_cm: q3,
        d_max_cm: d[d.len() - 1],
        whisker_lo_cm: inside().fold(f64::INFINITY, f64::min),
        whisker_hi_cm: inside().fold(f64::NEG_INFINITY, f64::max),
        d_med_px: med * px,
        d_q3_px: q3 * px,
        rbar: ok.iter().map(|r| r.acc_reward).sum::<f64>() / ok.len() as f64,
        outliers,
    })
}

/// Percentage changes from `a` to `b`; `None` where `a`'s metric is zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub d_med_decrease_pct: Option<f64>,
    pub rbar_increase_pct: Option<f64>,
    pub flags: Vec<String>,
}

pub fn compare(a: &CampaignSummary, b: &CampaignSummary) -> Comparison {
    let mut flags = Vec::new();
    let d_med_decrease_pct = if a.d_med_cm == 0.0 {
        flags.push("d_med of baseline is zero".to_string());
        None
    } else {
        Some(100.0 * (a.d_med_cm - b.d_med_cm) / a.d_med_cm)
    };
    let rbar_increase_pct = if a.rbar == 0.0 {
        flags.push("rbar of baseline is zero".to_string());
        None
    } else {
        Some(100.0 * (b.rbar - a.rbar) / a.rbar)
    };
    Comparison {
        d_med_decrease_pct,
        rbar_increase_pct,
        flags,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Format::Json,
            _ => Format::Csv,
        }
    }
}

/// Raw per-trial row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    #[serde(rename = "trial-id")]
    pub trial_id: usize,
    pub d_m: f64,
    pub d_cm: f64,
    pub d_px: f64,
    pub acc_reward: f64,
}

/// Table row for one policy variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub nets: String,
    pub d_med_cm: f64,
    pub d_med_px: f64,
    pub d_q3_cm: f64,
    pub d_q3_px: f64,
    pub rbar: f64,
}

pub fn trial_rows(reports: &[TrialReport], camera: &Camera) -> Vec<TrialRow> {
    reports
        .iter()
        .map(|r| {
            let d_cm = r.final_distance * 100.0;
            TrialRow {
                trial_id: r.trial_id,
                d_m: r.final_distance,
                d_cm,
                d_px: d_cm * camera.px_per_cm(),
                acc_reward: r.acc_reward,
            }
        })
        .collect()
}

pub fn summary_row(nets: &str, s: &CampaignSummary) -> SummaryRow {
    SummaryRow {
        nets: nets.to_string(),
        d_med_cm: s.d_med_cm,
        d_med_px: s.d_med_px,
        d_q3_cm: s.d_q3_cm,
        d_q3_px: s.d_q3_px,
        rbar: s.rbar,
    }
}

/// Exportable record with a fixed CSV column order.
pub trait ReportRow: Serialize + for<'de> Deserialize<'de> {
    const HEADER: &'static [&'static str];
}

impl ReportRow for TrialRow {
    const HEADER: &'static [&'static str] = &["trial-id", "d_m", "d_cm", "d_px", "acc_reward"];
}

impl ReportRow for SummaryRow {
    const HEADER: &'static [&'static str] = &["nets", "d_med_cm", "d_med_px", "d_q3_cm", "d_q3_px", "rbar"];
}

pub fn export_rows<T: ReportRow>(rows: &[T], path: &Path, format: Format) -> Result<(), EvalError> {
    let bytes = match format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(rows).map_err(|e| EvalError::io(path, e))?;
            s.push('\n');
            s.into_bytes()
        }
        Format::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
            w.write_record(T::HEADER).map_err(|e| EvalError::io(path, e))?;
            for row in rows {
                w.serialize(row).map_err(|e| EvalError::io(path, e))?;
            }
            w.into_inner().map_err(|e| EvalError::io(path, e))?
        }
    };
    std::fs::write(path, bytes).map_err(|e| EvalError::io(path, e))
}

pub fn parse_rows<T: ReportRow>(path: &Path, format: Format) -> Result<Vec<T>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| EvalError::io(path, e))?;
    match format {
        Format::Json => serde_json::from_str(&text).map_err(|e| EvalError::parse(path, e)),
        Format::Csv => csv::Reader::from_reader(text.as_bytes())
            .deserialize()
            .collect::<Result<Vec<T>, _>>()
            .map_err(|e| EvalError::parse(path, e)),
    }
}
