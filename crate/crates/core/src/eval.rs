//! Scoring decoders: activation RMS error, open-loop endpoint error and
//! plot-ready CSV exports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arm::{ArmError, ArmParams, JointState, Vec2};
use crate::dataset::{format_value, Dataset, Method, ReachPair, Sample, Split};
use crate::muscle::ActivationTrajectory;
use crate::nn::ReachDecoder;
use crate::{CONTROL_DT, HORIZON, MUSCLES};

/// Mean endpoint error (cm) of the torque-predicting network used as the
/// comparison point for activation decoders.
pub const TORQUE_DNN_BASELINE_CM: f64 = 0.347;
pub const REPORT_VERSION: &str = "1";
const INTEGRATION_DT: f64 = 0.001;
const ELBOW_SIGN: f64 = 1.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("dataset has no test samples")]
    NoTestSamples,
    #[error("every test sample failed to simulate")]
    AllExcluded,
    #[error(transparent)]
    Arm(#[from] ArmError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Root-mean-square difference pooled over every entry.
pub fn rms_error(pred: &[f64], truth: &[f64]) -> Result<f64, EvalError> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(EvalError::DimensionMismatch(format!(
            "{} predicted values for {} targets",
            pred.len(),
            truth.len()
        )));
    }
    let ss: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((ss / pred.len() as f64).sqrt())
}

/// Hand position after driving the arm from rest at `pair.start` with `act`.
pub fn simulate_endpoint(
    arm: &ArmParams,
    pair: &ReachPair,
    act: &ActivationTrajectory,
) -> Result<Vec2, ArmError> {
    let q0 = arm.inverse_kinematics(&pair.start, ELBOW_SIGN)?;
    let sim = arm.simulate_activations(&JointState::at_rest(q0), act, CONTROL_DT, INTEGRATION_DT)?;
    Ok(sim.final_hand)
}

/// Hand path (51 points including the start) under `act`.
pub fn simulate_hand_path(
    arm: &ArmParams,
    pair: &ReachPair,
    act: &ActivationTrajectory,
) -> Result<Vec<Vec2>, ArmError> {
    let q0 = arm.inverse_kinematics(&pair.start, ELBOW_SIGN)?;
    let sim = arm.simulate_activations(&JointState::at_rest(q0), act, CONTROL_DT, INTEGRATION_DT)?;
    Ok(sim.states.iter().map(|s| arm.forward_kinematics(&s.q)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: u64,
    pub rms: f64,
    pub endpoint_cm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub id: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceValues {
    pub rms: f64,
    pub endpoint_mean_cm: f64,
    pub baseline_endpoint_cm: f64,
}

impl ReferenceValues {
    pub fn for_method(method: Method) -> Self {
        let (rms, endpoint_mean_cm) = match method {
            Method::Id => (0.0048, 0.125),
            Method::Oc => (0.0067, 0.127),
        };
        Self {
            rms,
            endpoint_mean_cm,
            baseline_endpoint_cm: TORQUE_DNN_BASELINE_CM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointStats {
    pub mean_cm: f64,
    pub max_cm: f64,
    pub p95_cm: f64,
}

impl EndpointStats {
    /// Mean, max and nearest-rank 95th percentile.
    pub fn from_errors(errors: &[f64]) -> Self {
        let mut sorted = errors.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        Self {
            mean_cm: sorted.iter().sum::<f64>() / n as f64,
            max_cm: sorted[n - 1],
            p95_cm: sorted[rank - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: String,
    pub method: Method,
    pub n_test: usize,
    /// Activation RMS pooled over all evaluated samples and dimensions.
    pub rms: f64,
    pub endpoint_mean_cm: f64,
    pub endpoint_max_cm: f64,
    pub endpoint_p95_cm: f64,
    pub excluded: Vec<Exclusion>,
    pub reference: ReferenceValues,
    pub per_sample: Vec<SampleScore>,
    /// Free-form configuration echo and input checksums supplied by the caller.
    pub config_echo: serde_json::Value,
    pub checksums: BTreeMap<String, String>,
}

impl EvalReport {
    /// Aggregates recomputed from `per_sample`.
    pub fn recompute(&self) -> (f64, EndpointStats) {
        let ms = self.per_sample.iter().map(|s| s.rms * s.rms).sum::<f64>()
            / self.per_sample.len() as f64;
        let errors: Vec<f64> = self.per_sample.iter().map(|s| s.endpoint_cm).collect();
        (ms.sqrt(), EndpointStats::from_errors(&errors))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

fn score_samples<F>(samples: &[&Sample], arm: &ArmParams, predict: F) -> Vec<Result<SampleScore, Exclusion>>
where
    F: Fn(&Sample) -> ActivationTrajectory + Sync,
{
    samples
        .par_iter()
        .map(|s| {
            let pred = predict(s);
            let rms = rms_error(&pred.flatten(), &s.activations.flatten())
                .expect("trajectories share a shape");
            match simulate_endpoint(arm, &s.pair, &pred) {
                Ok(hand) => Ok(SampleScore {
                    id: s.id,
                    rms,
                    endpoint_cm: 100.0 * (hand - s.pair.end).norm(),
                }),
                Err(e) => Err(Exclusion {
                    id: s.id,
                    reason: e.to_string(),
                }),
            }
        })
        .collect()
}

fn assemble(method: Method, results: Vec<Result<SampleScore, Exclusion>>) -> Result<EvalReport, EvalError> {
    let n_test = results.len();
    let mut per_sample = Vec::new();
    let mut excluded = Vec::new();
    for r in results {
        match r {
            Ok(s) => per_sample.push(s),
            Err(e) => excluded.push(e),
        }
    }
    if per_sample.is_empty() {
        return Err(EvalError::AllExcluded);
    }
    let mut report = EvalReport {
        format_version: REPORT_VERSION.into(),
        method,
        n_test,
        rms: 0.0,
        endpoint_mean_cm: 0.0,
        endpoint_max_cm: 0.0,
        endpoint_p95_cm: 0.0,
        excluded,
        reference: ReferenceValues::for_method(method),
        per_sample,
        config_echo: serde_json::Value::Null,
        checksums: BTreeMap::new(),
    };
    let (rms, stats) = report.recompute();
    report.rms = rms;
    report.endpoint_mean_cm = stats.mean_cm;
    report.endpoint_max_cm = stats.max_cm;
    report.endpoint_p95_cm = stats.p95_cm;
    Ok(report)
}

fn test_samples(ds: &Dataset) -> Result<Vec<&Sample>, EvalError> {
    let test: Vec<&Sample> = ds.split(Split::Test).collect();
    if test.is_empty() {
        return Err(EvalError::NoTestSamples);
    }
    Ok(test)
}

/// Scores `decoder` on the test split. Samples whose simulation fails are
/// listed in `excluded` and left out of the aggregates.
pub fn endpoint_errors(
    decoder: &ReachDecoder,
    ds: &Dataset,
    arm: &ArmParams,
) -> Result<EvalReport, EvalError> {
    let test = test_samples(ds)?;
    assemble(ds.config.method, score_samples(&test, arm, |s| decoder.predict(&s.pair)))
}

/// Same scoring applied to the ground-truth labels themselves.
pub fn label_endpoint_errors(ds: &Dataset, arm: &ArmParams) -> Result<EvalReport, EvalError> {
    let test = test_samples(ds)?;
    assemble(ds.config.method, score_samples(&test, arm, |s| s.activations.clone()))
}

/// Eight 0.10 m reaches from the region center at 45 degree increments.
pub fn center_out_pairs(center: Vec2) -> Vec<ReachPair> {
    (0..8)
        .map(|k| {
            let angle = k as f64 * std::f64::consts::FRAC_PI_4;
            ReachPair {
                start: center,
                end: center + 0.10 * Vec2::new(angle.cos(), angle.sin()),
            }
        })
        .collect()
}

fn write_csv(path: &Path, header: &[String], rows: Vec<Vec<String>>) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    fs::write(path, w.into_inner().expect("in-memory flush"))?;
    Ok(())
}

/// Writes `activations_<id>.csv` for the first `n_samples` test samples and
/// `handpaths.csv` for the center-out reaches, which are labeled with
/// `label`. Returns the written paths.
pub fn export_plot_data<L>(
    decoder: &ReachDecoder,
    ds: &Dataset,
    arm: &ArmParams,
    out_dir: &Path,
    n_samples: usize,
    label: L,
) -> Result<Vec<PathBuf>, EvalError>
where
    L: Fn(&ReachPair) -> Option<ActivationTrajectory>,
{
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    let mut header = vec!["t".to_string()];
    header.extend((0..MUSCLES).map(|m| format!("m{m}_true")));
    header.extend((0..MUSCLES).map(|m| format!("m{m}_pred")));
    for s in ds.split(Split::Test).take(n_samples) {
        let pred = decoder.predict(&s.pair);
        let rows = (0..HORIZON)
            .map(|k| {
                let mut row = vec![format_value((k + 1) as f64 * CONTROL_DT)];
                row.extend(s.activations.rows()[k].iter().map(|v| format_value(*v)));
                row.extend(pred.rows()[k].iter().map(|v| format_value(*v)));
                row
            })
            .collect();
        let path = out_dir.join(format!("activations_{}.csv", s.id));
        write_csv(&path, &header, rows)?;
        written.push(path);
    }

    let header: Vec<String> = ["reach_index", "t", "x_true", "y_true", "x_pred", "y_pred"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::new();
    for (i, pair) in center_out_pairs(ds.config.region.center()).iter().enumerate() {
        let pred = simulate_hand_path(arm, pair, &decoder.predict(pair))?;
        let truth = label(pair)
            .map(|a| simulate_hand_path(arm, pair, &a))
            .transpose()?;
        for (k, p) in pred.iter().enumerate() {
            let (xt, yt) = match &truth {
                Some(path) => (format_value(path[k].x), format_value(path[k].y)),
                None => (String::new(), String::new()),
            };
            rows.push(vec![
                i.to_string(),
                format_value(k as f64 * CONTROL_DT),
                xt,
                yt,
                format_value(p.x),
                format_value(p.y),
            ]);
        }
    }
    let path = out_dir.join("handpaths.csv");
    write_csv(&path, &header, rows)?;
    written.push(path);
    Ok(written)
}
