//! Reach sampling, ground-truth labeling and on-disk datasets.
//!
//! Sample `id` draws from its own ChaCha stream `(seed, id)`, so the dataset
//! is a pure function of the seed whether samples are labeled serially or in
//! parallel.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arm::{ArmError, ArmParams, Vec2};
use crate::checksum::sha256_hex;
use crate::ilqg::{ilqg_solve, IlqgConfig, IlqgError, ReachSolution, TorqueTrajectory};
use crate::minjerk::MinJerkSpec;
use crate::muscle::{torques_to_activations, ActivationTrajectory, MuscleError};
use crate::{CONTROL_DT, HORIZON, MUSCLES, TRAJ_DIM};

pub const PAIRS_FILE: &str = "pairs.csv";
pub const ACTIVATIONS_FILE: &str = "activations.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: &str = "1";

const ELBOW_SIGN: f64 = 1.0;
/// An optimal-control label that stops short of convergence is kept only if
/// its endpoint is this close to the target (m).
const OC_ENDPOINT_TOL: f64 = 2e-3;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("sampling exhausted: {0} consecutive rejections")]
    SamplingExhausted(u32),
    #[error("labeling failed for sample {id}: {reason}")]
    LabelingExhausted { id: u64, reason: String },
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
    #[error("{file}:{line}:{column}: {message}")]
    Format {
        file: String,
        line: u64,
        column: usize,
        message: String,
    },
    #[error("checksum mismatch for {file}")]
    ChecksumMismatch { file: String },
    #[error("{0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How ground-truth activations are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Minimum-jerk path, inverse kinematics and inverse dynamics.
    Id,
    /// Torque-space iterative LQ optimal control.
    Oc,
}

impl Method {
    pub const ALL: [Method; 2] = [Method::Id, Method::Oc];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Id => "id",
            Method::Oc => "oc",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "id" => Ok(Method::Id),
            "oc" => Ok(Method::Oc),
            other => Err(format!("unknown method '{other}' (expected id or oc)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Start and end hand positions of one reach (m).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReachPair {
    pub start: Vec2,
    pub end: Vec2,
}

impl ReachPair {
    pub fn new(x0: f64, y0: f64, xf: f64, yf: f64) -> Self {
        Self {
            start: Vec2::new(x0, y0),
            end: Vec2::new(xf, yf),
        }
    }

    pub fn distance(&self) -> f64 {
        (self.end - self.start).norm()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.start.x, self.start.y, self.end.x, self.end.y]
    }
}

/// Axis-aligned rectangle in hand space (m), shoulder at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Region {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Region {
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> Vec2 {
        Vec2::new(
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn contains(&self, p: &Vec2) -> bool {
        (self.x_min..=self.x_max).contains(&p.x) && (self.y_min..=self.y_max).contains(&p.y)
    }
}

impl Default for Region {
    fn default() -> Self {
        Self {
            x_min: -0.25,
            x_max: 0.25,
            y_min: 0.25,
            y_max: 0.45,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub region: Region,
    /// Upper bound on reach length (m).
    pub max_reach_dist: f64,
    /// Both endpoints must satisfy `min_radius <= |p| <= max_radius` (m).
    pub min_radius: f64,
    pub max_radius: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub method: Method,
    /// Consecutive rejected draws before sampling gives up.
    pub max_rejections: u32,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            region: Region::default(),
            max_reach_dist: 0.10,
            min_radius: 0.15,
            max_radius: 0.58,
            n_train: 4500,
            n_test: 500,
            seed: 1,
            method: Method::Id,
            max_rejections: 1000,
        }
    }
}

impl GenConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let r = &self.region;
        if !(r.x_max > r.x_min && r.y_max > r.y_min) {
            out.push("region must have positive width and height".into());
        }
        if !(self.max_reach_dist > 0.0) {
            out.push("max_reach_dist must be positive".into());
        }
        if !(self.min_radius >= 0.0 && self.max_radius > self.min_radius) {
            out.push("reachability margin must satisfy 0 <= min_radius < max_radius".into());
        }
        if self.n_train == 0 || self.n_test == 0 {
            out.push("n_train and n_test must be positive".into());
        }
        if self.max_rejections == 0 {
            out.push("max_rejections must be positive".into());
        }
        out
    }

    pub fn total(&self) -> usize {
        self.n_train + self.n_test
    }

    pub fn split_of(&self, id: u64) -> Split {
        if (id as usize) < self.n_train {
            Split::Train
        } else {
            Split::Test
        }
    }
}

/// Random stream owned by sample `id`.
pub fn sample_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Draws one reach, resampling until both endpoints are inside the
/// reachability margin. Returns the pair and the number of rejected draws.
pub fn sample_reach_pair<R: Rng>(
    rng: &mut R,
    cfg: &GenConfig,
    arm: &ArmParams,
) -> Result<(ReachPair, u32), DatasetError> {
    let r = &cfg.region;
    let mut rejected = 0;
    loop {
        let start = Vec2::new(
            rng.random_range(r.x_min..r.x_max),
            rng.random_range(r.y_min..r.y_max),
        );
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        // (0, max]: 1 - U[0,1) never hits zero.
        let dist = cfg.max_reach_dist * (1.0 - rng.random::<f64>());
        let end = start + Vec2::new(angle.cos(), angle.sin()) * dist;
        let pair = ReachPair { start, end };
        let ok = [start, end].iter().all(|p| {
            let n = p.norm();
            n >= cfg.min_radius
                && n <= cfg.max_radius
                && arm.inverse_kinematics(p, ELBOW_SIGN).is_ok()
        });
        if ok {
            return Ok((pair, rejected));
        }
        rejected += 1;
        if rejected >= cfg.max_rejections {
            return Err(DatasetError::SamplingExhausted(rejected));
        }
    }
}

/// Why a sampled pair could not be labeled.
#[derive(Debug, Error, Clone)]
pub enum LabelError {
    #[error(transparent)]
    Arm(#[from] ArmError),
    #[error(transparent)]
    Muscle(#[from] MuscleError),
    #[error(transparent)]
    Ilqg(#[from] IlqgError),
    #[error("optimal control missed the target by {0:.4} m")]
    Missed(f64),
}

impl LabelError {
    /// Errors that justify drawing a fresh pair rather than aborting.
    pub fn is_resampleable(&self) -> bool {
        matches!(
            self,
            LabelError::Arm(ArmError::SingularConfiguration { .. })
                | LabelError::Arm(ArmError::Unreachable { .. })
                | LabelError::Muscle(MuscleError::InfeasibleStep { .. })
                | LabelError::Ilqg(IlqgError::NumericalBlowup { .. })
                | LabelError::Missed(_)
        )
    }
}

/// Joint torques that track the minimum-jerk path between the endpoints.
pub fn inverse_dynamics_torques(
    arm: &ArmParams,
    pair: &ReachPair,
) -> Result<TorqueTrajectory, ArmError> {
    let spec = MinJerkSpec::new(pair.start, pair.end, HORIZON as f64 * CONTROL_DT, HORIZON)
        .expect("fixed duration and sample count are valid");
    let path = spec.sample().expect("sample times lie inside the duration");
    let steps = path
        .iter()
        .map(|h| {
            let q = arm.inverse_kinematics(&h.p, ELBOW_SIGN)?;
            let (qd, qdd) = arm.hand_to_joint_derivatives(&q, &h.v, &h.a)?;
            Ok(arm.inverse_dynamics(&q, &qd, &qdd))
        })
        .collect::<Result<Vec<_>, ArmError>>()?;
    Ok(TorqueTrajectory::new(steps).expect("inverse dynamics yields finite torques"))
}

/// Joint torques from trajectory optimization. A solve that stopped short of
/// convergence is accepted only when it still lands on the target.
pub fn optimal_control_torques(
    arm: &ArmParams,
    pair: &ReachPair,
    cfg: &IlqgConfig,
) -> Result<TorqueTrajectory, LabelError> {
    let sol = match ilqg_solve(arm, pair, cfg) {
        Ok(sol) => sol,
        Err(IlqgError::NotConverged(sol)) => {
            let sol = ReachSolution::from_solution(arm, *sol);
            let miss = (sol.final_hand - pair.end).norm();
            if miss > OC_ENDPOINT_TOL {
                return Err(LabelError::Missed(miss));
            }
            sol
        }
        Err(e) => return Err(e.into()),
    };
    Ok(sol.torques)
}

/// Ground-truth activations for one reach.
pub fn label_pair(
    method: Method,
    arm: &ArmParams,
    ilqg: &IlqgConfig,
    pair: &ReachPair,
) -> Result<ActivationTrajectory, LabelError> {
    let torques = match method {
        Method::Id => inverse_dynamics_torques(arm, pair)?,
        Method::Oc => optimal_control_torques(arm, pair, ilqg)?,
    };
    Ok(torques_to_activations(&arm.gain_matrix(), &torques)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub pair: ReachPair,
    pub activations: ActivationTrajectory,
    pub method: Method,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenStats {
    /// Draws rejected by the reachability margin.
    pub pair_rejections: u64,
    /// Pairs discarded because labeling failed.
    pub label_rejections: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: GenConfig,
    pub arm: ArmParams,
    pub ilqg: Option<IlqgConfig>,
    pub stats: GenStats,
    pub samples: Vec<Sample>,
}

fn generate_sample(
    id: u64,
    cfg: &GenConfig,
    arm: &ArmParams,
    ilqg: &IlqgConfig,
) -> Result<(Sample, GenStats), DatasetError> {
    let mut rng = sample_rng(cfg.seed, id);
    let mut stats = GenStats::default();
    loop {
        let (pair, rejected) = sample_reach_pair(&mut rng, cfg, arm)?;
        stats.pair_rejections += u64::from(rejected);
        match label_pair(cfg.method, arm, ilqg, &pair) {
            Ok(activations) => {
                let sample = Sample {
                    id,
                    pair,
                    activations,
                    method: cfg.method,
                    split: cfg.split_of(id),
                };
                return Ok((sample, stats));
            }
            Err(e) if e.is_resampleable() => {
                stats.label_rejections += 1;
                if stats.label_rejections >= u64::from(cfg.max_rejections) {
                    return Err(DatasetError::LabelingExhausted {
                        id,
                        reason: e.to_string(),
                    });
                }
            }
            Err(e) => {
                return Err(DatasetError::LabelingExhausted {
                    id,
                    reason: e.to_string(),
                })
            }
        }
    }
}

/// Samples and labels `n_train + n_test` reaches. Work is spread over the
/// current rayon pool; the result does not depend on its size.
pub fn generate_dataset(
    cfg: &GenConfig,
    arm: &ArmParams,
    ilqg: &IlqgConfig,
) -> Result<Dataset, DatasetError> {
    let violations = cfg.violations();
    if !violations.is_empty() {
        return Err(DatasetError::InvalidConfig(violations.join("; ")));
    }
    let results = (0..cfg.total() as u64)
        .into_par_iter()
        .map(|id| generate_sample(id, cfg, arm, ilqg))
        .collect::<Result<Vec<_>, _>>()?;
    let mut stats = GenStats::default();
    let samples = results
        .into_iter()
        .map(|(sample, s)| {
            stats.pair_rejections += s.pair_rejections;
            stats.label_rejections += s.label_rejections;
            sample
        })
        .collect();
    Ok(Dataset {
        config: cfg.clone(),
        arm: arm.clone(),
        ilqg: (cfg.method == Method::Oc).then(|| ilqg.clone()),
        stats,
        samples,
    })
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn train(&self) -> Vec<&Sample> {
        self.split(Split::Train).collect()
    }

    pub fn test(&self) -> Vec<&Sample> {
        self.split(Split::Test).collect()
    }

    /// Copy with every value replaced by its persisted decimal form.
    pub fn quantized(&self) -> Dataset {
        let mut out = self.clone();
        for s in &mut out.samples {
            let p = s.pair.to_array().map(quantize);
            s.pair = ReachPair::new(p[0], p[1], p[2], p[3]);
            let flat: Vec<f64> = s.activations.flatten().into_iter().map(quantize).collect();
            s.activations =
                ActivationTrajectory::from_flat(&flat).expect("rounding keeps values in range");
        }
        out
    }
}

/// Nine significant digits.
pub fn format_value(x: f64) -> String {
    format!("{x:.8e}")
}

fn quantize(x: f64) -> f64 {
    format_value(x).parse().expect("formatted float parses")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowCounts {
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: String,
    pub seed: u64,
    pub gen: GenConfig,
    pub arm: ArmParams,
    pub ilqg: Option<IlqgConfig>,
    pub rejections: GenStats,
    pub rows: RowCounts,
    pub checksums: BTreeMap<String, String>,
}

fn activation_header() -> Vec<String> {
    std::iter::once("id".to_string())
        .chain((0..HORIZON).flat_map(|t| (0..MUSCLES).map(move |m| format!("a_t{t:02}_m{m}"))))
        .collect()
}

fn csv_bytes<I>(header: &[String], rows: I) -> Vec<u8>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// Writes `pairs.csv`, `activations.csv` and `manifest.json` into `dir`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<DatasetManifest, DatasetError> {
    fs::create_dir_all(dir)?;
    let pair_header: Vec<String> = ["id", "x0", "y0", "xf", "yf", "split", "method"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let pairs = csv_bytes(
        &pair_header,
        ds.samples.iter().map(|s| {
            let mut row = vec![s.id.to_string()];
            row.extend(s.pair.to_array().iter().map(|v| format_value(*v)));
            row.push(s.split.as_str().into());
            row.push(s.method.as_str().into());
            row
        }),
    );
    let activations = csv_bytes(
        &activation_header(),
        ds.samples.iter().map(|s| {
            std::iter::once(s.id.to_string())
                .chain(s.activations.flatten().into_iter().map(format_value))
                .collect()
        }),
    );
    let mut checksums = BTreeMap::new();
    checksums.insert(PAIRS_FILE.to_string(), sha256_hex(&pairs));
    checksums.insert(ACTIVATIONS_FILE.to_string(), sha256_hex(&activations));
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION.into(),
        seed: ds.config.seed,
        gen: ds.config.clone(),
        arm: ds.arm.clone(),
        ilqg: ds.ilqg.clone(),
        rejections: ds.stats,
        rows: RowCounts {
            train: ds.split(Split::Train).count(),
            test: ds.split(Split::Test).count(),
        },
        checksums,
    };
    fs::write(dir.join(PAIRS_FILE), &pairs)?;
    fs::write(dir.join(ACTIVATIONS_FILE), &activations)?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(manifest)
}

fn format_error(file: &str, line: u64, column: usize, message: impl Into<String>) -> DatasetError {
    DatasetError::Format {
        file: file.into(),
        line,
        column,
        message: message.into(),
    }
}

fn read_verified(dir: &Path, file: &str, manifest: &DatasetManifest) -> Result<Vec<u8>, DatasetError> {
    let bytes = fs::read(dir.join(file))?;
    let expected = manifest
        .checksums
        .get(file)
        .ok_or_else(|| DatasetError::Manifest(format!("manifest has no checksum for {file}")))?;
    if &sha256_hex(&bytes) != expected {
        return Err(DatasetError::ChecksumMismatch { file: file.into() });
    }
    Ok(bytes)
}

struct CsvRows<'a> {
    file: &'a str,
    reader: csv::Reader<&'a [u8]>,
}

impl<'a> CsvRows<'a> {
    fn open(file: &'a str, bytes: &'a [u8], header: &[String]) -> Result<Self, DatasetError> {
        let mut reader = csv::ReaderBuilder::new()
            .flexible(true)
            .from_reader(bytes);
        let found = reader
            .headers()
            .map_err(|e| format_error(file, 1, 1, e.to_string()))?;
        if found.len() != header.len() {
            return Err(format_error(
                file,
                1,
                found.len().min(header.len()) + 1,
                format!("expected {} header columns, found {}", header.len(), found.len()),
            ));
        }
        if let Some(col) = found.iter().zip(header).position(|(a, b)| a != b) {
            return Err(format_error(file, 1, col + 1, format!("expected column '{}'", header[col])));
        }
        Ok(Self { file, reader })
    }

    /// Rows with their line numbers, each checked for `width` fields.
    fn rows(mut self, width: usize) -> Result<Vec<(u64, csv::StringRecord)>, DatasetError> {
        let mut out = Vec::new();
        let mut record = csv::StringRecord::new();
        loop {
            let line = self.reader.position().line();
            match self.reader.read_record(&mut record) {
                Ok(false) => return Ok(out),
                Ok(true) => {
                    if record.len() != width {
                        return Err(format_error(
                            self.file,
                            line,
                            record.len().min(width) + 1,
                            format!("row has {} fields, expected {width}", record.len()),
                        ));
                    }
                    out.push((line, record.clone()));
                }
                Err(e) => return Err(format_error(self.file, line, 1, e.to_string())),
            }
        }
    }
}

fn parse_field<T: FromStr>(file: &str, line: u64, record: &csv::StringRecord, col: usize) -> Result<T, DatasetError> {
    record[col]
        .parse()
        .map_err(|_| format_error(file, line, col + 1, format!("cannot parse '{}'", &record[col])))
}

/// Reads a dataset written by [`save_dataset`], verifying checksums.
pub fn load_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let manifest_text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: DatasetManifest = serde_json::from_str(&manifest_text).map_err(|e| {
        format_error(MANIFEST_FILE, e.line() as u64, e.column(), e.to_string())
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(DatasetError::Manifest(format!(
            "unsupported dataset format version '{}'",
            manifest.format_version
        )));
    }
    let pairs_bytes = read_verified(dir, PAIRS_FILE, &manifest)?;
    let act_bytes = read_verified(dir, ACTIVATIONS_FILE, &manifest)?;

    let pair_header: Vec<String> = ["id", "x0", "y0", "xf", "yf", "split", "method"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let pair_rows = CsvRows::open(PAIRS_FILE, &pairs_bytes, &pair_header)?.rows(pair_header.len())?;
    let act_rows =
        CsvRows::open(ACTIVATIONS_FILE, &act_bytes, &activation_header())?.rows(TRAJ_DIM + 1)?;
    if pair_rows.len() != act_rows.len() {
        return Err(format_error(
            ACTIVATIONS_FILE,
            act_rows.last().map_or(1, |(l, _)| *l),
            1,
            format!("{} activation rows for {} pairs", act_rows.len(), pair_rows.len()),
        ));
    }

    let mut samples = Vec::with_capacity(pair_rows.len());
    for ((pline, prec), (aline, arec)) in pair_rows.iter().zip(&act_rows) {
        let f = PAIRS_FILE;
        let id: u64 = parse_field(f, *pline, prec, 0)?;
        let coords: Vec<f64> = (1..5)
            .map(|c| parse_field(f, *pline, prec, c))
            .collect::<Result<_, _>>()?;
        let split = match &prec[5] {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(format_error(f, *pline, 6, format!("unknown split '{other}'"))),
        };
        let method: Method = prec[6]
            .parse()
            .map_err(|e: String| format_error(f, *pline, 7, e))?;

        let a = ACTIVATIONS_FILE;
        let act_id: u64 = parse_field(a, *aline, arec, 0)?;
        if act_id != id {
            return Err(format_error(a, *aline, 1, format!("id {act_id} does not match pair id {id}")));
        }
        let values: Vec<f64> = (1..=TRAJ_DIM)
            .map(|c| parse_field(a, *aline, arec, c))
            .collect::<Result<_, _>>()?;
        let activations = ActivationTrajectory::from_flat(&values)
            .map_err(|e| format_error(a, *aline, 2, e.to_string()))?;
        samples.push(Sample {
            id,
            pair: ReachPair::new(coords[0], coords[1], coords[2], coords[3]),
            activations,
            method,
            split,
        });
    }

    let train = samples.iter().filter(|s| s.split == Split::Train).count();
    if train != manifest.rows.train || samples.len() - train != manifest.rows.test {
        return Err(DatasetError::Manifest("row counts disagree with manifest".into()));
    }
    Ok(Dataset {
        config: manifest.gen,
        arm: manifest.arm,
        ilqg: manifest.ilqg,
        stats: manifest.rejections,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(n_train: usize, n_test: usize) -> GenConfig {
        GenConfig {
            n_train,
            n_test,
            seed: 7,
            ..GenConfig::default()
        }
    }

    #[test]
    fn draws_stay_inside_region_and_reach() {
        let cfg = GenConfig::default();
        let arm = ArmParams::default();
        let mut rng = sample_rng(cfg.seed, 0);
        for _ in 0..10_000 {
            let (pair, _) = sample_reach_pair(&mut rng, &cfg, &arm).unwrap();
            assert!(cfg.region.contains(&pair.start));
            assert!(pair.distance() <= 0.10 + 1e-15);
            assert!(pair.distance() > 0.0);
            for p in [pair.start, pair.end] {
                assert!((0.15..=0.58).contains(&p.norm()));
            }
        }
    }

    #[test]
    fn same_seed_same_pairs() {
        let cfg = GenConfig::default();
        let arm = ArmParams::default();
        let mut a = sample_rng(3, 11);
        let mut b = sample_rng(3, 11);
        for _ in 0..100 {
            assert_eq!(
                sample_reach_pair(&mut a, &cfg, &arm).unwrap(),
                sample_reach_pair(&mut b, &cfg, &arm).unwrap()
            );
        }
    }

    #[test]
    fn unreachable_region_exhausts_sampling() {
        let cfg = GenConfig {
            region: Region {
                x_min: -0.25,
                x_max: 0.25,
                y_min: 1.9,
                y_max: 2.1,
            },
            ..GenConfig::default()
        };
        let err = sample_reach_pair(&mut sample_rng(1, 0), &cfg, &ArmParams::default()).unwrap_err();
        assert!(matches!(err, DatasetError::SamplingExhausted(1000)));
    }

    #[test]
    fn generated_dataset_has_requested_shape() {
        let cfg = small_config(6, 4);
        let ds = generate_dataset(&cfg, &ArmParams::default(), &IlqgConfig::default()).unwrap();
        assert_eq!(ds.train().len(), 6);
        assert_eq!(ds.test().len(), 4);
        for (i, s) in ds.samples.iter().enumerate() {
            assert_eq!(s.id, i as u64);
            let flat = s.activations.flatten();
            assert_eq!(flat.len(), TRAJ_DIM);
            assert!(flat.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn parallel_generation_matches_serial() {
        let cfg = small_config(5, 3);
        let arm = ArmParams::default();
        let ilqg = IlqgConfig::default();
        let serial = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| generate_dataset(&cfg, &arm, &ilqg).unwrap());
        let parallel = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap()
            .install(|| generate_dataset(&cfg, &arm, &ilqg).unwrap());
        assert_eq!(serial, parallel);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&small_config(7, 3), &ArmParams::default(), &IlqgConfig::default()).unwrap();
        let manifest = save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(manifest.rows, RowCounts { train: 7, test: 3 });
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded, ds.quantized());
        // Writing the loaded copy reproduces the same bytes.
        let again = tempfile::tempdir().unwrap();
        save_dataset(&loaded, again.path()).unwrap();
        for f in [PAIRS_FILE, ACTIVATIONS_FILE, MANIFEST_FILE] {
            assert_eq!(
                fs::read(dir.path().join(f)).unwrap(),
                fs::read(again.path().join(f)).unwrap()
            );
        }
    }

    fn rewrite_with_checksums(dir: &Path, file: &str, bytes: &[u8]) {
        fs::write(dir.join(file), bytes).unwrap();
        let mut m: DatasetManifest =
            serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE)).unwrap()).unwrap();
        m.checksums.insert(file.into(), sha256_hex(bytes));
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&m).unwrap()).unwrap();
    }

    #[test]
    fn truncated_activations_name_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&small_config(3, 1), &ArmParams::default(), &IlqgConfig::default()).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(ACTIVATIONS_FILE)).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let cut = lines[3].rfind(',').unwrap();
        lines[3].truncate(cut);
        let broken = lines.join("\n") + "\n";
        rewrite_with_checksums(dir.path(), ACTIVATIONS_FILE, broken.as_bytes());
        match load_dataset(dir.path()).unwrap_err() {
            DatasetError::Format { file, line, .. } => {
                assert_eq!(file, ACTIVATIONS_FILE);
                assert_eq!(line, 4);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn flipped_digit_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&small_config(2, 1), &ArmParams::default(), &IlqgConfig::default()).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let path = dir.path().join(PAIRS_FILE);
        let mut bytes = fs::read(&path).unwrap();
        let pos = bytes.iter().rposition(|b| b.is_ascii_digit() && *b != b'9').unwrap();
        bytes[pos] += 1;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_dataset(dir.path()).unwrap_err(),
            DatasetError::ChecksumMismatch { .. }
        ));
    }

    #[test]
    fn bad_number_reports_column() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&small_config(2, 1), &ArmParams::default(), &IlqgConfig::default()).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(PAIRS_FILE)).unwrap();
        let broken = text.replacen(",train,", ",bogus,", 1);
        rewrite_with_checksums(dir.path(), PAIRS_FILE, broken.as_bytes());
        match load_dataset(dir.path()).unwrap_err() {
            DatasetError::Format { line, column, .. } => assert_eq!((line, column), (2, 6)),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn method_parsing() {
        assert_eq!("OC".parse::<Method>().unwrap(), Method::Oc);
        assert!("xx".parse::<Method>().is_err());
    }
}
