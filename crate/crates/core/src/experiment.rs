//! Experiment runner: configuration, ensemble execution and CSV output.
//!
//! Configuration is a flat `key = value` text format with `#` comments.
//! Every key is optional; defaults reproduce the reference scenario
//! (`u = 1/4`, `v = 1/8`, `k1 = 0.55`, two-level truncation, 500
//! trajectories of 20 time units at `dt = 1e-3`).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix4, Vector4};
use sha2::{Digest, Sha256};

use crate::classical::{simulate_ou_with_increments, SeriesAccumulator};
use crate::error::{ConfigError, Error, Result};
use crate::grid::TimeGrid;
use crate::model::{build_combined_model, map_classical_to_cavity, CombinedModel, OuParams};
use crate::operators::SpaceLayout;
use crate::parallel::{fold_ordered, Parallelism};
use crate::qekf::{self, EkfState, TwoCavityEkf};
use crate::rng::{wiener_increments, StreamKind, StreamSeed};
use crate::sme::{self, DensityState, MeasurementRecord, SmeScheme};

pub const CSV_HEADER: [&str; 8] = [
    "t",
    "q_true_mean",
    "q_hat_sme_mean",
    "q_hat_qekf_mean",
    "q1_hat_sme",
    "q1_hat_qekf",
    "n_traj",
    "seed",
];

/// Default initial-error magnitudes for a perturbation sweep.
pub const DEFAULT_XI_SWEEP: [f64; 3] = [0.25, 0.5, 1.0];

/// Maximum fraction of trajectories allowed to abort before the run fails.
pub const MAX_ABORT_FRACTION: f64 = 0.01;

const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordMode {
    /// The QEKF filters the same record as the SME.
    Shared,
    /// The QEKF filters a record from an independently seeded truth run.
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterSet {
    pub sme: bool,
    pub qekf: bool,
}

impl FilterSet {
    pub fn any(&self) -> bool {
        self.sme || self.qekf
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub u: f64,
    pub v: f64,
    pub q0: f64,
    pub k1: f64,
    pub fock_dims: [usize; 2],
    pub dt: f64,
    pub t_final: f64,
    pub n_traj: usize,
    pub base_seed: u64,
    pub p0_scale: f64,
    pub xi: f64,
    pub x0_override: Option<[f64; 4]>,
    pub filters: FilterSet,
    pub record_mode: RecordMode,
    pub sme_scheme: SmeScheme,
    pub out_path: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let ou = OuParams::default();
        Self {
            u: ou.u,
            v: ou.v,
            q0: ou.q0,
            k1: 0.55,
            fock_dims: [2, 2],
            dt: 1e-3,
            t_final: 20.0,
            n_traj: 500,
            base_seed: 0,
            p0_scale: 0.25,
            xi: 0.0,
            x0_override: None,
            filters: FilterSet {
                sme: true,
                qekf: true,
            },
            record_mode: RecordMode::Shared,
            sme_scheme: SmeScheme::Kraus,
            out_path: PathBuf::from("results.csv"),
        }
    }
}

const KEYS: [&str; 16] = [
    "u",
    "v",
    "q0",
    "k1",
    "fock_dims",
    "dt",
    "t_final",
    "n_traj",
    "base_seed",
    "p0_scale",
    "xi",
    "x0_override",
    "filters",
    "record_mode",
    "sme_scheme",
    "out_path",
];

fn parse_f64(key: &str, line: usize, value: &str) -> Result<f64, ConfigError> {
    let v: f64 = value.parse().map_err(|e| ConfigError::InvalidValue {
        key: key.into(),
        line,
        reason: format!("`{value}` is not a number ({e})"),
    })?;
    if !v.is_finite() {
        return Err(ConfigError::InvalidValue {
            key: key.into(),
            line,
            reason: format!("`{value}` is not finite"),
        });
    }
    Ok(v)
}

fn parse_int<T: std::str::FromStr>(key: &str, line: usize, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| ConfigError::InvalidValue {
        key: key.into(),
        line,
        reason: format!("`{value}` is not a non-negative integer ({e})"),
    })
}

fn split_list(value: &str) -> Vec<&str> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect()
}

impl ExperimentConfig {
    fn set(&mut self, key: &str, line: usize, value: &str) -> Result<(), ConfigError> {
        let invalid = |reason: String| ConfigError::InvalidValue {
            key: key.into(),
            line,
            reason,
        };
        match key {
            "u" => self.u = parse_f64(key, line, value)?,
            "v" => self.v = parse_f64(key, line, value)?,
            "q0" => self.q0 = parse_f64(key, line, value)?,
            "k1" => self.k1 = parse_f64(key, line, value)?,
            "dt" => self.dt = parse_f64(key, line, value)?,
            "t_final" => self.t_final = parse_f64(key, line, value)?,
            "p0_scale" => self.p0_scale = parse_f64(key, line, value)?,
            "xi" => self.xi = parse_f64(key, line, value)?,
            "n_traj" => self.n_traj = parse_int(key, line, value)?,
            "base_seed" => self.base_seed = parse_int(key, line, value)?,
            "fock_dims" => {
                let parts = split_list(value);
                if parts.len() != 2 {
                    return Err(invalid(format!(
                        "expected two comma-separated dimensions, got `{value}`"
                    )));
                }
                self.fock_dims = [parse_int(key, line, parts[0])?, parse_int(key, line, parts[1])?];
            }
            "x0_override" => {
                let parts = split_list(value);
                if parts.is_empty() || value.eq_ignore_ascii_case("none") {
                    self.x0_override = None;
                } else if parts.len() == 4 {
                    let mut x = [0.0; 4];
                    for (xi, p) in x.iter_mut().zip(&parts) {
                        *xi = parse_f64(key, line, p)?;
                    }
                    self.x0_override = Some(x);
                } else {
                    return Err(invalid(format!(
                        "expected 4 comma-separated values or `none`, got `{value}`"
                    )));
                }
            }
            "filters" => {
                let mut set = FilterSet {
                    sme: false,
                    qekf: false,
                };
                if !value.eq_ignore_ascii_case("none") {
                    for f in split_list(value) {
                        match f {
                            "sme" => set.sme = true,
                            "qekf" => set.qekf = true,
                            other => {
                                return Err(invalid(format!("unknown filter `{other}` (expected sme, qekf)")))
                            }
                        }
                    }
                }
                self.filters = set;
            }
            "record_mode" => {
                self.record_mode = match value {
                    "shared" => RecordMode::Shared,
                    "independent" => RecordMode::Independent,
                    other => {
                        return Err(invalid(format!(
                            "expected `shared` or `independent`, got `{other}`"
                        )))
                    }
                }
            }
            "sme_scheme" => {
                self.sme_scheme = match value {
                    "kraus" => SmeScheme::Kraus,
                    "euler" => SmeScheme::Euler,
                    other => return Err(invalid(format!("expected `kraus` or `euler`, got `{other}`"))),
                }
            }
            "out_path" => {
                if value.is_empty() {
                    return Err(invalid("path is empty".into()));
                }
                self.out_path = PathBuf::from(value);
            }
            _ => {
                return Err(ConfigError::UnknownKey {
                    key: key.into(),
                    line,
                })
            }
        }
        Ok(())
    }

    /// Checks every invariant. `lines` maps keys to the source line they
    /// were read from, for diagnostics.
    fn validate_with(&self, lines: &dyn Fn(&str) -> Option<usize>) -> Result<(), ConfigError> {
        let fail = |key: &str, reason: String| ConfigError::Invariant {
            key: key.into(),
            line: lines(key),
            reason,
        };
        if !(self.u > 0.0) {
            return Err(fail("u", format!("u > 0 is required, got {}", self.u)));
        }
        if self.v == 0.0 {
            return Err(fail(
                "v",
                "v must be nonzero (the cavity mapping is singular)".into(),
            ));
        }
        if !(self.k1 > 0.0) {
            return Err(fail("k1", format!("k1 > 0 is required, got {}", self.k1)));
        }
        if self.fock_dims.iter().any(|&d| d < 2) {
            return Err(fail(
                "fock_dims",
                format!("each dimension must be >= 2, got {:?}", self.fock_dims),
            ));
        }
        if !(self.dt > 0.0) {
            return Err(fail("dt", format!("dt > 0 is required, got {}", self.dt)));
        }
        if !(self.t_final >= self.dt) {
            return Err(fail(
                "t_final",
                format!("t_final >= dt is required, got {}", self.t_final),
            ));
        }
        if self.n_traj < 1 {
            return Err(fail("n_traj", "n_traj >= 1 is required".into()));
        }
        if !(self.p0_scale >= 0.0) {
            return Err(fail(
                "p0_scale",
                format!("p0_scale >= 0 is required, got {}", self.p0_scale),
            ));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.validate_with(&|_| None)
    }

    /// Serializes every key; [`parse_config`] reads the output back to an
    /// equal config.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "u = {}", self.u);
        let _ = writeln!(s, "v = {}", self.v);
        let _ = writeln!(s, "q0 = {}", self.q0);
        let _ = writeln!(s, "k1 = {}", self.k1);
        let _ = writeln!(s, "fock_dims = {},{}", self.fock_dims[0], self.fock_dims[1]);
        let _ = writeln!(s, "dt = {}", self.dt);
        let _ = writeln!(s, "t_final = {}", self.t_final);
        let _ = writeln!(s, "n_traj = {}", self.n_traj);
        let _ = writeln!(s, "base_seed = {}", self.base_seed);
        let _ = writeln!(s, "p0_scale = {}", self.p0_scale);
        let _ = writeln!(s, "xi = {}", self.xi);
        match self.x0_override {
            Some(x) => {
                let _ = writeln!(s, "x0_override = {},{},{},{}", x[0], x[1], x[2], x[3]);
            }
            None => {
                let _ = writeln!(s, "x0_override = none");
            }
        }
        let filters = match (self.filters.sme, self.filters.qekf) {
            (true, true) => "sme,qekf",
            (true, false) => "sme",
            (false, true) => "qekf",
            (false, false) => "none",
        };
        let _ = writeln!(s, "filters = {filters}");
        let mode = match self.record_mode {
            RecordMode::Shared => "shared",
            RecordMode::Independent => "independent",
        };
        let _ = writeln!(s, "record_mode = {mode}");
        let scheme = match self.sme_scheme {
            SmeScheme::Kraus => "kraus",
            SmeScheme::Euler => "euler",
        };
        let _ = writeln!(s, "sme_scheme = {scheme}");
        let _ = writeln!(s, "out_path = {}", self.out_path.display());
        s
    }

    pub fn ou_params(&self) -> OuParams {
        OuParams {
            u: self.u,
            v: self.v,
            q0: self.q0,
        }
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.dt, self.t_final)
    }

    pub fn build_model(&self) -> Result<CombinedModel> {
        let mapping = map_classical_to_cavity(&self.ou_params())?;
        build_combined_model(self.k1, mapping, SpaceLayout::new(self.fock_dims.to_vec())?)
    }

    /// The combined-system initial state: the plus state in each cavity.
    pub fn initial_density(&self) -> Result<DensityState> {
        DensityState::plus_product(&SpaceLayout::new(self.fock_dims.to_vec())?)
    }

    /// `x0_override` if set, otherwise the SME initial quadratures shifted
    /// by `xi * (0.5, 0.5, 0.5, 0.5)`.
    pub fn initial_ekf_state(&self, model: &CombinedModel) -> Result<EkfState<4>> {
        let x0 = match self.x0_override {
            Some(x) => Vector4::from(x),
            None => {
                let rho0 = self.initial_density()?;
                let base = Vector4::from(model.readout().quadrature_means(rho0.matrix()));
                base + Vector4::repeat(0.5 * self.xi)
            }
        };
        EkfState::new(x0, Matrix4::identity() * self.p0_scale)
    }
}

/// Parses the flat `key = value` format. Unknown keys, duplicate keys,
/// unparsable values and invariant violations are reported with key name
/// and line number.
pub fn parse_config(source: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = ExperimentConfig::default();
    let mut seen: Vec<(String, usize)> = Vec::new();
    for (idx, raw) in source.lines().enumerate() {
        let line = idx + 1;
        let text = raw.split('#').next().unwrap_or("").trim();
        if text.is_empty() {
            continue;
        }
        let (key, value) = text.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line,
            text: text.into(),
        })?;
        let key = key.trim();
        let value = value.trim();
        if !KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey {
                key: key.into(),
                line,
            });
        }
        if seen.iter().any(|(k, _)| k == key) {
            return Err(ConfigError::DuplicateKey {
                key: key.into(),
                line,
            });
        }
        cfg.set(key, line, value)?;
        seen.push((key.to_string(), line));
    }
    cfg.validate_with(&|k| seen.iter().find(|(key, _)| key == k).map(|(_, l)| *l))?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(parse_config(&text)?)
}

/// Command-line overrides applied on top of a parsed config.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub out_path: Option<PathBuf>,
    pub base_seed: Option<u64>,
    pub n_traj: Option<usize>,
    pub xi: Option<f64>,
}

impl ExperimentConfig {
    pub fn with_overrides(mut self, o: &Overrides) -> Result<Self, ConfigError> {
        if let Some(p) = &o.out_path {
            self.out_path = p.clone();
        }
        if let Some(s) = o.base_seed {
            self.base_seed = s;
        }
        if let Some(n) = o.n_traj {
            self.n_traj = n;
        }
        if let Some(xi) = o.xi {
            if !xi.is_finite() {
                return Err(ConfigError::Invariant {
                    key: "xi".into(),
                    line: None,
                    reason: "must be finite".into(),
                });
            }
            self.xi = xi;
        }
        self.validate()?;
        Ok(self)
    }
}

/// Series of one trajectory, kept for the representative trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySeries {
    pub index: usize,
    pub q_true: Vec<f64>,
    pub q_hat_sme: Option<Vec<f64>>,
    pub q_hat_qekf: Option<Vec<f64>>,
    pub quad_sme: Option<Vec<[f64; 4]>>,
    pub quad_qekf: Option<Vec<[f64; 4]>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Abort {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub t: Vec<f64>,
    /// Ensemble mean of the classical disturbance paths.
    pub q_true_mean: Vec<f64>,
    pub q_true_var: Vec<f64>,
    pub q_hat_sme_mean: Option<Vec<f64>>,
    pub q_hat_qekf_mean: Option<Vec<f64>>,
    /// First trajectory that completed, with full series.
    pub representative: Option<TrajectorySeries>,
    /// Final-window mean of q_hat per trajectory, `None` for aborted ones.
    pub sme_tail_means: Vec<Option<f64>>,
    pub qekf_tail_means: Vec<Option<f64>>,
    pub aborted: Vec<Abort>,
    /// SHA-256 over the records consumed by each filter, in trajectory order.
    pub sme_records_sha256: Option<String>,
    pub qekf_records_sha256: Option<String>,
    pub version: &'static str,
}

impl RunResult {
    pub fn q1_hat_sme(&self) -> Option<Vec<f64>> {
        let r = self.representative.as_ref()?;
        Some(r.quad_sme.as_ref()?.iter().map(|x| x[0]).collect())
    }

    pub fn q1_hat_qekf(&self) -> Option<Vec<f64>> {
        let r = self.representative.as_ref()?;
        Some(r.quad_qekf.as_ref()?.iter().map(|x| x[0]).collect())
    }
}

/// Mean of `series` over the last `fraction` of its points.
pub fn tail_mean(series: &[f64], fraction: f64) -> f64 {
    let start = ((1.0 - fraction) * series.len() as f64).floor() as usize;
    let tail = &series[start.min(series.len().saturating_sub(1))..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

struct TrajectoryOutput {
    q_true: Vec<f64>,
    quantum: std::result::Result<QuantumOutput, String>,
}

struct QuantumOutput {
    q_hat_sme: Option<Vec<f64>>,
    quad_sme: Option<Vec<[f64; 4]>>,
    q_hat_qekf: Option<Vec<f64>>,
    quad_qekf: Option<Vec<[f64; 4]>>,
    sme_digest: Option<[u8; 32]>,
    qekf_digest: Option<[u8; 32]>,
}

fn record_digest(record: &MeasurementRecord) -> [u8; 32] {
    let mut h = Sha256::new();
    for dy in &record.dy {
        h.update(dy.to_le_bytes());
    }
    h.finalize().into()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    model: CombinedModel,
    grid: TimeGrid,
    rho0: DensityState,
    ekf0: EkfState<4>,
}

impl Runner<'_> {
    fn classical(&self, i: usize) -> Vec<f64> {
        let seed = StreamSeed::for_trajectory(self.cfg.base_seed, StreamKind::ClassicalPath, i);
        let dw = wiener_increments(seed, self.grid.dt(), self.grid.steps());
        simulate_ou_with_increments(&self.cfg.ou_params(), self.grid.dt(), &dw)
    }

    fn quantum(&self, i: usize) -> Result<QuantumOutput> {
        let cfg = self.cfg;
        let readout = self.model.readout();
        let system = self.model.system();
        let mut out = QuantumOutput {
            q_hat_sme: None,
            quad_sme: None,
            q_hat_qekf: None,
            quad_qekf: None,
            sme_digest: None,
            qekf_digest: None,
        };

        let truth_seed = StreamSeed::for_trajectory(cfg.base_seed, StreamKind::TruthRecord, i);
        let mut q_hat = Vec::with_capacity(self.grid.len());
        let mut quads = Vec::with_capacity(self.grid.len());
        let record = sme::unravel(
            system,
            &self.rho0,
            self.grid,
            truth_seed,
            cfg.sme_scheme,
            |_, rho| {
                if cfg.filters.sme {
                    q_hat.push(readout.q_hat(rho.matrix()));
                    quads.push(readout.quadrature_means(rho.matrix()));
                }
            },
        )?;
        // The SME filter started from the truth's initial state on the
        // truth's record is the truth trajectory itself.
        if cfg.filters.sme {
            out.q_hat_sme = Some(q_hat);
            out.quad_sme = Some(quads);
            out.sme_digest = Some(record_digest(&record));
        }

        if cfg.filters.qekf {
            let qekf_record = match cfg.record_mode {
                RecordMode::Shared => record,
                RecordMode::Independent => {
                    let seed = StreamSeed::for_trajectory(cfg.base_seed, StreamKind::IndependentRecord, i);
                    sme::unravel(system, &self.rho0, self.grid, seed, cfg.sme_scheme, |_, _| {})?
                }
            };
            let fns = TwoCavityEkf::new(&self.model);
            let mut q_hat = Vec::with_capacity(self.grid.len());
            let mut quads = Vec::with_capacity(self.grid.len());
            qekf::filter_with(&fns, self.ekf0, &qekf_record, |_, s| {
                q_hat.push(fns.q_hat(&s.x_hat));
                quads.push(s.x_hat.into());
            })?;
            out.q_hat_qekf = Some(q_hat);
            out.quad_qekf = Some(quads);
            out.qekf_digest = Some(record_digest(&qekf_record));
        }
        Ok(out)
    }

    fn trajectory(&self, i: usize) -> TrajectoryOutput {
        let q_true = self.classical(i);
        let quantum = if self.cfg.filters.any() {
            self.quantum(i).map_err(|e| e.to_string())
        } else {
            Ok(QuantumOutput {
                q_hat_sme: None,
                quad_sme: None,
                q_hat_qekf: None,
                quad_qekf: None,
                sme_digest: None,
                qekf_digest: None,
            })
        };
        TrajectoryOutput { q_true, quantum }
    }
}

struct Aggregate {
    q_true: SeriesAccumulator,
    sme: SeriesAccumulator,
    qekf: SeriesAccumulator,
    sme_hash: Sha256,
    qekf_hash: Sha256,
    representative: Option<TrajectorySeries>,
    sme_tail: Vec<Option<f64>>,
    qekf_tail: Vec<Option<f64>>,
    aborted: Vec<Abort>,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    run_experiment_with(cfg, Parallelism::default())
}

/// Runs the ensemble. Trajectories are independent and may execute in any
/// order; every reduction folds them in index order, so the result does not
/// depend on `par` or on the number of workers.
pub fn run_experiment_with(cfg: &ExperimentConfig, par: Parallelism) -> Result<RunResult> {
    cfg.validate()?;
    let model = cfg.build_model()?;
    let grid = cfg.grid()?;
    let runner = Runner {
        cfg,
        rho0: cfg.initial_density()?,
        ekf0: cfg.initial_ekf_state(&model)?,
        model,
        grid,
    };

    let len = grid.len();
    let mut agg = Aggregate {
        q_true: SeriesAccumulator::new(len),
        sme: SeriesAccumulator::new(len),
        qekf: SeriesAccumulator::new(len),
        sme_hash: Sha256::new(),
        qekf_hash: Sha256::new(),
        representative: None,
        sme_tail: Vec::with_capacity(cfg.n_traj),
        qekf_tail: Vec::with_capacity(cfg.n_traj),
        aborted: Vec::new(),
    };

    fold_ordered(
        cfg.n_traj,
        CHUNK,
        par,
        |i| runner.trajectory(i),
        &mut agg,
        |agg, i, out| {
            agg.q_true.push(&out.q_true);
            match out.quantum {
                Ok(q) => {
                    if let Some(s) = &q.q_hat_sme {
                        agg.sme.push(s);
                        agg.sme_tail.push(Some(tail_mean(s, 0.2)));
                    }
                    if let Some(s) = &q.q_hat_qekf {
                        agg.qekf.push(s);
                        agg.qekf_tail.push(Some(tail_mean(s, 0.2)));
                    }
                    if let Some(d) = q.sme_digest {
                        agg.sme_hash.update(d);
                    }
                    if let Some(d) = q.qekf_digest {
                        agg.qekf_hash.update(d);
                    }
                    if agg.representative.is_none() {
                        agg.representative = Some(TrajectorySeries {
                            index: i,
                            q_true: out.q_true,
                            q_hat_sme: q.q_hat_sme,
                            q_hat_qekf: q.q_hat_qekf,
                            quad_sme: q.quad_sme,
                            quad_qekf: q.quad_qekf,
                        });
                    }
                }
                Err(reason) => {
                    agg.sme_tail.push(None);
                    agg.qekf_tail.push(None);
                    agg.aborted.push(Abort { index: i, reason });
                }
            }
        },
    );

    if agg.aborted.len() as f64 > MAX_ABORT_FRACTION * cfg.n_traj as f64 {
        return Err(Error::TooManyAborts {
            aborted: agg.aborted.len(),
            total: cfg.n_traj,
            first: format!("trajectory {}: {}", agg.aborted[0].index, agg.aborted[0].reason),
        });
    }

    let sme_on = cfg.filters.sme;
    let qekf_on = cfg.filters.qekf;
    Ok(RunResult {
        config: cfg.clone(),
        t: grid.times(),
        q_true_var: agg.q_true.variance(),
        q_true_mean: agg.q_true.mean().to_vec(),
        q_hat_sme_mean: sme_on.then(|| agg.sme.mean().to_vec()),
        q_hat_qekf_mean: qekf_on.then(|| agg.qekf.mean().to_vec()),
        representative: agg.representative,
        sme_tail_means: if sme_on { agg.sme_tail } else { Vec::new() },
        qekf_tail_means: if qekf_on { agg.qekf_tail } else { Vec::new() },
        aborted: agg.aborted,
        sme_records_sha256: sme_on.then(|| hex(&agg.sme_hash.finalize())),
        qekf_records_sha256: qekf_on.then(|| hex(&agg.qekf_hash.finalize())),
        version: env!("CARGO_PKG_VERSION"),
    })
}

/// Path of the metadata file written next to `csv_path`.
pub fn metadata_path(csv_path: &Path) -> PathBuf {
    let mut s = csv_path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes the per-grid-point CSV and its metadata sidecar. Floats carry 17
/// significant digits; columns of filters that did not run are empty.
pub fn write_csv(result: &RunResult, path: &Path) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(CSV_HEADER).map_err(csv_err(path))?;

    let q1_sme = result.q1_hat_sme();
    let q1_qekf = result.q1_hat_qekf();
    let opt = |s: &Option<Vec<f64>>, k: usize| s.as_ref().map(|v| fmt17(v[k])).unwrap_or_default();
    let n_traj = result.config.n_traj.to_string();
    let seed = result.config.base_seed.to_string();
    for k in 0..result.t.len() {
        w.write_record([
            fmt17(result.t[k]),
            fmt17(result.q_true_mean[k]),
            opt(&result.q_hat_sme_mean, k),
            opt(&result.q_hat_qekf_mean, k),
            opt(&q1_sme, k),
            opt(&q1_qekf, k),
            n_traj.clone(),
            seed.clone(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err)?;

    let meta = metadata_path(path);
    fs::write(&meta, render_metadata(result)).map_err(|source| Error::Io { path: meta, source })
}

const RUN_SECTION: &str = "[run]";

fn render_metadata(result: &RunResult) -> String {
    let mut s = result.config.echo();
    let _ = writeln!(s, "{RUN_SECTION}");
    let _ = writeln!(s, "version = {}", result.version);
    let _ = writeln!(s, "base_seed = {}", result.config.base_seed);
    let _ = writeln!(s, "n_traj = {}", result.config.n_traj);
    if let Some(r) = &result.representative {
        let _ = writeln!(s, "representative = {}", r.index);
    }
    let _ = writeln!(
        s,
        "sme_records_sha256 = {}",
        result.sme_records_sha256.as_deref().unwrap_or("none")
    );
    let _ = writeln!(
        s,
        "qekf_records_sha256 = {}",
        result.qekf_records_sha256.as_deref().unwrap_or("none")
    );
    let _ = writeln!(s, "aborted = {}", result.aborted.len());
    for a in &result.aborted {
        let _ = writeln!(s, "abort = {}: {}", a.index, a.reason.replace('\n', " "));
    }
    s
}

/// Contents of a metadata sidecar.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetadata {
    pub config: ExperimentConfig,
    /// `key = value` pairs of the run section, in file order.
    pub entries: Vec<(String, String)>,
}

impl RunMetadata {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

pub fn read_metadata(path: &Path) -> Result<RunMetadata> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let (config_text, run_text) = text.split_once(RUN_SECTION).ok_or_else(|| Error::Malformed {
        path: path.to_path_buf(),
        reason: format!("missing `{RUN_SECTION}` section"),
    })?;
    let config = parse_config(config_text)?;
    let entries = run_text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect();
    Ok(RunMetadata { config, entries })
}

/// Columns read back from a result CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvSeries {
    pub t: Vec<f64>,
    pub q_true_mean: Vec<f64>,
    pub q_hat_sme_mean: Option<Vec<f64>>,
    pub q_hat_qekf_mean: Option<Vec<f64>>,
    pub q1_hat_sme: Option<Vec<f64>>,
    pub q1_hat_qekf: Option<Vec<f64>>,
    pub n_traj: Vec<usize>,
    pub seed: Vec<u64>,
}

pub fn read_csv(path: &Path) -> Result<CsvSeries> {
    let malformed = |reason: String| Error::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header = r.headers().map_err(csv_err(path))?.clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(malformed(format!("unexpected header {header:?}")));
    }
    let mut cols: Vec<Vec<Option<f64>>> = vec![Vec::new(); 6];
    let mut n_traj = Vec::new();
    let mut seed = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        for (c, col) in cols.iter_mut().enumerate() {
            let field = &rec[c];
            col.push(if field.is_empty() {
                None
            } else {
                Some(
                    field
                        .parse()
                        .map_err(|e| malformed(format!("row {}: column {}: {e}", row + 2, CSV_HEADER[c])))?,
                )
            });
        }
        n_traj.push(
            rec[6]
                .parse()
                .map_err(|e| malformed(format!("row {}: n_traj: {e}", row + 2)))?,
        );
        seed.push(
            rec[7]
                .parse()
                .map_err(|e| malformed(format!("row {}: seed: {e}", row + 2)))?,
        );
    }
    let required = |c: usize| -> Result<Vec<f64>> {
        cols[c]
            .iter()
            .map(|v| v.ok_or_else(|| malformed(format!("column {} has empty cells", CSV_HEADER[c]))))
            .collect()
    };
    let optional = |c: usize| -> Option<Vec<f64>> { cols[c].iter().copied().collect() };
    Ok(CsvSeries {
        t: required(0)?,
        q_true_mean: required(1)?,
        q_hat_sme_mean: optional(2),
        q_hat_qekf_mean: optional(3),
        q1_hat_sme: optional(4),
        q1_hat_qekf: optional(5),
        n_traj,
        seed,
    })
}
