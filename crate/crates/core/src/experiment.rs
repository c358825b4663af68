//! Seeded Monte-Carlo experiments: scene, measurement, estimation, metrics.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::baselines::{somp_estimate, uamp_sbl_twolayer, GreedyConfig};
use crate::channel::{
    assemble_channel, generate_scene, scene_to_text, ArrayGeometry, OfdmGrid, PathParams,
    SceneConfig, SpatialFrequencyChannel,
};
use crate::error::{invalid, Error, Result};
use crate::linalg::{complex_normal, norm_sq, CMatrix, RMatrix, C64};
use crate::mrf::{MrfParams, MrfPrior};
use crate::state_evolution::{
    build_mmse_table, default_noise_grid, se_trajectory, DenoiserConfig, MmseTable, SeTrajectory,
};
use crate::transform::{
    build_combiner, from_angular_delay, AngularDelayChannel, Dictionary, MeasurementOperator,
};
use crate::uamp::{self, OutputEstimate, UampConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algorithm {
    /// UAMP-SBL with the MRF support prior.
    UampSblMrf,
    /// UAMP-SBL with independent coefficients.
    UampSbl,
    /// Greedy orthogonal matching pursuit.
    Somp,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::UampSblMrf, Algorithm::UampSbl, Algorithm::Somp];

    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::UampSblMrf => "uamp-sbl-mrf",
            Algorithm::UampSbl => "uamp-sbl",
            Algorithm::Somp => "somp",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s.trim())
            .ok_or_else(|| invalid("algorithm", format!("unknown algorithm `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Convergence,
    Snr,
    Pilots,
    Paths,
    Trajectory,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::Convergence => "convergence",
            ExperimentKind::Snr => "snr",
            ExperimentKind::Pilots => "pilots",
            ExperimentKind::Paths => "paths",
            ExperimentKind::Trajectory => "trajectory",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "convergence" => Ok(ExperimentKind::Convergence),
            "snr" => Ok(ExperimentKind::Snr),
            "pilots" => Ok(ExperimentKind::Pilots),
            "paths" => Ok(ExperimentKind::Paths),
            "trajectory" => Ok(ExperimentKind::Trajectory),
            other => Err(invalid(
                "experiment",
                format!("unknown experiment `{other}`"),
            )),
        }
    }
}

/// Everything needed to reproduce an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub n_antennas: usize,
    pub n_rf: usize,
    /// Pilot time slots P; the combiner has `P * n_rf` rows.
    pub n_slots: usize,
    pub n_subcarriers: usize,
    pub n_angles: usize,
    pub n_delays: usize,
    pub carrier_hz: f64,
    pub bandwidth_hz: f64,
    pub n_paths: usize,
    pub snr_db: Vec<f64>,
    pub n_trials: usize,
    pub seed: u64,
    pub algorithms: Vec<Algorithm>,
    pub mrf: MrfParams,
    pub mrf_sweeps: usize,
    pub uamp: UampConfig,
    /// `None` uses the default budget for the problem size.
    pub somp_atoms: Option<usize>,
    pub somp_residual_tol: f64,
    pub distance_range_m: (f64, f64),
    pub angle_range_rad: (f64, f64),
    pub vr_fraction_range: (f64, f64),
    pub line_of_sight: bool,
    pub diffraction_probability: f64,
    pub pilot_slots: Vec<usize>,
    pub path_counts: Vec<usize>,
    pub trajectory_snr_db: f64,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    /// Measure wall time per estimate. Off by default so outputs are
    /// byte-identical across runs.
    pub record_timing: bool,
    /// Largest tolerated fraction of diverged estimates.
    pub divergence_budget: f64,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// Laptop-sized problem: M = 512 measurements, N = 1024 unknowns.
    pub fn desk() -> Self {
        let scene = SceneConfig::default();
        Self {
            n_antennas: 64,
            n_rf: 4,
            n_slots: 8,
            n_subcarriers: 16,
            n_angles: 64,
            n_delays: 16,
            carrier_hz: 30e9,
            bandwidth_hz: 1.6e9,
            n_paths: 4,
            snr_db: vec![0.0, 5.0, 10.0, 15.0, 20.0],
            n_trials: 50,
            seed: 1,
            algorithms: Algorithm::ALL.to_vec(),
            mrf: MrfParams::default(),
            mrf_sweeps: 1,
            uamp: UampConfig::default(),
            somp_atoms: None,
            somp_residual_tol: 1e-6,
            distance_range_m: scene.distance_range_m,
            angle_range_rad: scene.angle_range_rad,
            vr_fraction_range: scene.vr_fraction_range,
            line_of_sight: scene.line_of_sight,
            diffraction_probability: scene.diffraction_probability,
            pilot_slots: vec![6, 8, 10, 12, 16],
            path_counts: vec![2, 4, 6],
            trajectory_snr_db: 5.0,
            threads: 0,
            record_timing: false,
            divergence_budget: 0.1,
            output: None,
        }
    }

    /// The full-size simulation parameters.
    pub fn paper() -> Self {
        Self {
            n_antennas: 256,
            n_rf: 16,
            n_subcarriers: 64,
            n_angles: 256,
            n_delays: 64,
            pilot_slots: (6..=16).collect(),
            ..Self::desk()
        }
    }

    pub fn m_r(&self) -> usize {
        self.n_slots * self.n_rf
    }
    pub fn n_measurements(&self) -> usize {
        self.m_r() * self.n_subcarriers
    }
    pub fn n_unknowns(&self) -> usize {
        self.n_angles * self.n_delays
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            n_paths: self.n_paths,
            distance_range_m: self.distance_range_m,
            angle_range_rad: self.angle_range_rad,
            vr_fraction_range: self.vr_fraction_range,
            line_of_sight: self.line_of_sight,
            diffraction_probability: self.diffraction_probability,
        }
    }

    pub fn greedy_config(&self) -> GreedyConfig {
        let mut g = GreedyConfig::for_unknowns(self.n_unknowns());
        if let Some(k) = self.somp_atoms {
            g.max_atoms = k;
        }
        g.residual_tol = self.somp_residual_tol;
        g
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_antennas", self.n_antennas),
            ("n_rf", self.n_rf),
            ("n_slots", self.n_slots),
            ("n_subcarriers", self.n_subcarriers),
            ("n_angles", self.n_angles),
            ("n_delays", self.n_delays),
            ("n_trials", self.n_trials),
        ] {
            if v == 0 {
                return Err(invalid(name, "must be positive"));
            }
        }
        if self.snr_db.is_empty() {
            return Err(invalid("snr_db", "need at least one SNR point"));
        }
        if self.snr_db.iter().any(|s| !s.is_finite()) || !self.trajectory_snr_db.is_finite() {
            return Err(invalid("snr_db", "SNR values must be finite"));
        }
        if self.algorithms.is_empty() {
            return Err(invalid("algorithms", "need at least one algorithm"));
        }
        if self.pilot_slots.contains(&0) {
            return Err(invalid("pilot_slots", "slot counts must be positive"));
        }
        if !(0.0..=1.0).contains(&self.divergence_budget) {
            return Err(invalid("divergence_budget", "must be a fraction"));
        }
        self.mrf.validate()?;
        self.uamp.validate()?;
        self.greedy_config().validate()?;
        self.scene_config().validate()?;
        Dictionary::new(
            self.n_antennas,
            self.n_angles,
            self.n_subcarriers,
            self.n_delays,
        )?;
        ArrayGeometry::half_wavelength(self.n_antennas, self.carrier_hz)?;
        OfdmGrid::new(self.n_subcarriers, self.carrier_hz, self.bandwidth_hz)?;
        Ok(())
    }

    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let bad = |e: &dyn fmt::Display| invalid("config", format!("`{key}`: {e}"));
        macro_rules! num {
            () => {
                v.parse().map_err(|e| bad(&e))?
            };
        }
        let list_f64 = || -> Result<Vec<f64>> {
            v.split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|e| bad(&e)))
                .collect()
        };
        let list_usize = || -> Result<Vec<usize>> {
            v.split(',')
                .map(|s| s.trim().parse::<usize>().map_err(|e| bad(&e)))
                .collect()
        };
        match key.trim() {
            "n_antennas" | "N_R" => self.n_antennas = num!(),
            "n_rf" | "N_RF" => self.n_rf = num!(),
            "n_slots" | "P" => self.n_slots = num!(),
            "n_subcarriers" | "K" => self.n_subcarriers = num!(),
            "n_angles" | "I" => self.n_angles = num!(),
            "n_delays" | "Q" => self.n_delays = num!(),
            "carrier_hz" | "f_c" => self.carrier_hz = num!(),
            "bandwidth_hz" | "f_s" => self.bandwidth_hz = num!(),
            "n_paths" | "L" => self.n_paths = num!(),
            "snr_db" => self.snr_db = list_f64()?,
            "n_trials" => self.n_trials = num!(),
            "seed" => self.seed = num!(),
            "algorithms" => {
                self.algorithms = v.split(',').map(str::parse).collect::<Result<_>>()?;
            }
            "alpha" => self.mrf.alpha = num!(),
            "eta" => self.mrf.eta = num!(),
            "a" => self.mrf.a = num!(),
            "b" => self.mrf.b = num!(),
            "a_bar" => self.mrf.a_bar = num!(),
            "b_bar" => self.mrf.b_bar = num!(),
            "mrf_sweeps" => self.mrf_sweeps = num!(),
            "max_iters" => self.uamp.max_iters = num!(),
            "tol" => self.uamp.tol = num!(),
            "damping" => self.uamp.damping = num!(),
            "variance_floor" => self.uamp.variance_floor = num!(),
            "variance_cap" => self.uamp.variance_cap = num!(),
            "output_estimate" => {
                self.uamp.output_estimate = match v {
                    "posterior-mean" => OutputEstimate::PosteriorMean,
                    "shrunk-prediction" => OutputEstimate::ShrunkPrediction,
                    other => return Err(bad(&format!("unknown output estimate `{other}`"))),
                }
            }
            "somp_atoms" => self.somp_atoms = if v == "auto" { None } else { Some(num!()) },
            "somp_residual_tol" => self.somp_residual_tol = num!(),
            "distance_min" => self.distance_range_m.0 = num!(),
            "distance_max" => self.distance_range_m.1 = num!(),
            "angle_min" => self.angle_range_rad.0 = num!(),
            "angle_max" => self.angle_range_rad.1 = num!(),
            "vr_fraction_min" => self.vr_fraction_range.0 = num!(),
            "vr_fraction_max" => self.vr_fraction_range.1 = num!(),
            "line_of_sight" => self.line_of_sight = num!(),
            "diffraction_probability" => self.diffraction_probability = num!(),
            "pilot_slots" => self.pilot_slots = list_usize()?,
            "path_counts" => self.path_counts = list_usize()?,
            "trajectory_snr_db" => self.trajectory_snr_db = num!(),
            "threads" => self.threads = num!(),
            "record_timing" => self.record_timing = num!(),
            "divergence_budget" => self.divergence_budget = num!(),
            "output" => self.output = Some(PathBuf::from(v)),
            "preset" => {
                *self = match v {
                    "desk" => Self::desk(),
                    "paper" => Self::paper(),
                    other => return Err(bad(&format!("unknown preset `{other}`"))),
                }
            }
            other => return Err(invalid("config", format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Flat `key = value` text; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: idx + 1,
                    message: format!("expected `key = value`, found `{line}`"),
                });
            };
            self.set(k, v).map_err(|e| Error::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::desk();
        c.apply_text(text)?;
        Ok(c)
    }
}

/// `||H_hat - H||^2 / ||H||^2`.
pub fn nmse(h_hat: &CMatrix, h: &CMatrix) -> Result<f64> {
    if h_hat.shape() != h.shape() {
        return Err(Error::ShapeMismatch {
            context: "nmse",
            expected: h.shape(),
            actual: h_hat.shape(),
        });
    }
    let e = norm_sq(h);
    if e == 0.0 {
        return Err(Error::ZeroReference);
    }
    Ok(norm_sq(&(h_hat - h)) / e)
}

pub fn to_db(ratio: f64) -> f64 {
    10.0 * ratio.log10()
}

/// Received SNR `||W H||^2 / ||N||^2` in dB; `+inf` for zero noise.
pub fn snr_db(combiner: &CMatrix, h: &CMatrix, noise: &CMatrix) -> f64 {
    let n = norm_sq(noise);
    if n == 0.0 {
        return f64::INFINITY;
    }
    to_db(norm_sq(&(combiner * h)) / n)
}

/// Amplitude factor for a noise draw of energy `noise_energy` so that the
/// received SNR equals `target_db`.
pub fn noise_scale_for_snr(signal_energy: f64, noise_energy: f64, target_db: f64) -> f64 {
    (signal_energy / (noise_energy * 10f64.powf(target_db / 10.0))).sqrt()
}

/// Independent random stream for one trial.
pub fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

/// One fully specified estimation problem.
#[derive(Debug, Clone)]
pub struct TrialProblem {
    pub geometry: ArrayGeometry,
    pub grid: OfdmGrid,
    pub dictionary: Dictionary,
    pub scene: Vec<PathParams>,
    pub channel: SpatialFrequencyChannel,
    pub operator: MeasurementOperator,
    pub observation: CMatrix,
    pub noise: CMatrix,
    /// Per-entry noise variance.
    pub noise_variance: f64,
}

impl TrialProblem {
    /// The channel seen through the conjugate dictionaries, `F_A^H H F_D`.
    pub fn angular_delay_truth(&self) -> CMatrix {
        self.dictionary.angular().adjoint() * self.channel.entries() * self.dictionary.delay()
    }
}

/// Draw scene, combiner and noise for `trial` from its own stream, in that
/// order, so every trial is reproducible in isolation.
pub fn build_trial(config: &ExperimentConfig, trial: usize, snr_db: f64) -> Result<TrialProblem> {
    let mut rng = trial_rng(config.seed, trial);
    let geometry = ArrayGeometry::half_wavelength(config.n_antennas, config.carrier_hz)?;
    let grid = OfdmGrid::new(config.n_subcarriers, config.carrier_hz, config.bandwidth_hz)?;
    let dictionary = Dictionary::new(
        config.n_antennas,
        config.n_angles,
        config.n_subcarriers,
        config.n_delays,
    )?;
    let scene = generate_scene(&config.scene_config(), &geometry, &mut rng)?;
    let channel = assemble_channel(&scene, &geometry, &grid)?;
    let combiner = build_combiner(config.m_r(), config.n_rf, config.n_antennas, &mut rng)?;
    let clean = &combiner * channel.entries();
    let raw = complex_normal(&mut rng, clean.nrows(), clean.ncols());
    let scale = noise_scale_for_snr(norm_sq(&clean), norm_sq(&raw), snr_db);
    let noise = raw * C64::new(scale, 0.0);
    let observation = &clean + &noise;
    let operator = MeasurementOperator::new(combiner, &dictionary)?;
    Ok(TrialProblem {
        geometry,
        grid,
        dictionary,
        scene,
        channel,
        operator,
        observation,
        noise,
        noise_variance: scale * scale,
    })
}

/// Result of running one algorithm on one problem.
#[derive(Debug, Clone)]
pub struct AlgorithmRun {
    pub algorithm: Algorithm,
    pub x_hat: CMatrix,
    pub h_hat: CMatrix,
    /// Final NMSE (linear).
    pub nmse: f64,
    /// NMSE after each iteration; a single entry for greedy pursuit.
    pub nmse_trace: Vec<f64>,
    /// Effective noise level after each iteration (message-passing only).
    pub tau_q_trace: Vec<f64>,
    pub iterations: usize,
    pub wall_ms: f64,
}

pub fn run_algorithm(
    problem: &TrialProblem,
    algorithm: Algorithm,
    config: &ExperimentConfig,
) -> Result<AlgorithmRun> {
    let start = Instant::now();
    let h = problem.channel.entries();
    let dict = &problem.dictionary;
    let to_h = |x: &CMatrix| -> Result<CMatrix> {
        Ok(from_angular_delay(&AngularDelayChannel::new(x.clone()), dict)?.into_entries())
    };
    let (x_hat, nmse_trace, tau_q_trace, iterations) = match algorithm {
        Algorithm::Somp => {
            let out = somp_estimate(
                &problem.observation,
                &problem.operator,
                &config.greedy_config(),
            )?;
            let e = nmse(&to_h(&out.x_hat)?, h)?;
            (out.x_hat, vec![e], Vec::new(), out.support.len())
        }
        Algorithm::UampSblMrf | Algorithm::UampSbl => {
            let unitary = problem.operator.svd_preprocess()?;
            let r = unitary.transform_observation(&problem.observation)?;
            let mut trace = Vec::with_capacity(config.uamp.max_iters);
            let mut trace_err = None;
            let observer = |s: &uamp::UampState| match to_h(&s.x_hat).and_then(|hh| nmse(&hh, h)) {
                Ok(e) => trace.push(e),
                Err(e) => trace_err = Some(e),
            };
            let out = if algorithm == Algorithm::UampSblMrf {
                let mut prior = MrfPrior::new(config.mrf, config.mrf_sweeps)?;
                uamp::run(&r, &unitary, &mut prior, &config.uamp, observer)?
            } else {
                uamp_sbl_twolayer(&r, &unitary, &config.mrf, &config.uamp, observer)?
            };
            if let Some(e) = trace_err {
                return Err(e);
            }
            let taus = out.trace.iter().map(|t| t.tau_q).collect();
            (out.x_hat, trace, taus, out.iterations)
        }
    };
    let h_hat = to_h(&x_hat)?;
    let final_nmse = nmse(&h_hat, h)?;
    if !final_nmse.is_finite() {
        return Err(Error::Divergence {
            iteration: iterations,
            quantity: "nmse",
            value: final_nmse,
        });
    }
    Ok(AlgorithmRun {
        algorithm,
        x_hat,
        h_hat,
        nmse: final_nmse,
        nmse_trace,
        tau_q_trace,
        iterations,
        wall_ms: if config.record_timing {
            start.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordStatus {
    Ok,
    Diverged,
}

impl fmt::Display for RecordStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RecordStatus::Ok => "ok",
            RecordStatus::Diverged => "diverged",
        })
    }
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRecord {
    pub experiment: ExperimentKind,
    pub algorithm: Algorithm,
    pub trial: usize,
    pub seed: u64,
    pub snr_db: f64,
    pub pilot_slots: usize,
    pub n_paths: usize,
    /// Iteration index for traces; iterations (or atoms) used for finals.
    pub iteration: usize,
    /// For diverged estimates this is the 0 dB of the all-zero estimate.
    pub nmse_db: f64,
    pub wall_ms: f64,
    pub status: RecordStatus,
}

pub const CSV_HEADER: &str =
    "experiment,algorithm,trial,seed,snr_db,P,L,iteration,nmse_db,wall_ms,status";

impl ResultRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.experiment,
            self.algorithm,
            self.trial,
            self.seed,
            self.snr_db,
            self.pilot_slots,
            self.n_paths,
            self.iteration,
            self.nmse_db,
            self.wall_ms,
            self.status
        )
    }
}

pub fn write_csv<W: Write>(mut out: W, records: &[ResultRecord]) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(out, "{}", r.to_csv_row())?;
    }
    Ok(())
}

/// One sweep point: SNR, pilot slots and path count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub snr_db: f64,
    pub pilot_slots: usize,
    pub n_paths: usize,
}

pub fn sweep_points(config: &ExperimentConfig, kind: ExperimentKind) -> Vec<SweepPoint> {
    let base = SweepPoint {
        snr_db: config.snr_db[0],
        pilot_slots: config.n_slots,
        n_paths: config.n_paths,
    };
    match kind {
        ExperimentKind::Convergence | ExperimentKind::Snr => config
            .snr_db
            .iter()
            .map(|&snr_db| SweepPoint { snr_db, ..base })
            .collect(),
        ExperimentKind::Pilots => config
            .pilot_slots
            .iter()
            .map(|&pilot_slots| SweepPoint {
                pilot_slots,
                ..base
            })
            .collect(),
        ExperimentKind::Paths => config
            .path_counts
            .iter()
            .map(|&n_paths| SweepPoint { n_paths, ..base })
            .collect(),
        ExperimentKind::Trajectory => vec![SweepPoint {
            snr_db: config.trajectory_snr_db,
            ..base
        }],
    }
}

fn trial_records(
    config: &ExperimentConfig,
    kind: ExperimentKind,
    point: SweepPoint,
    trial: usize,
) -> Result<Vec<ResultRecord>> {
    let local = ExperimentConfig {
        n_slots: point.pilot_slots,
        n_paths: point.n_paths,
        ..config.clone()
    };
    let problem = build_trial(&local, trial, point.snr_db)?;
    let mut records = Vec::new();
    let record = |algorithm, iteration, nmse_db, wall_ms, status| ResultRecord {
        experiment: kind,
        algorithm,
        trial,
        seed: config.seed,
        snr_db: point.snr_db,
        pilot_slots: point.pilot_slots,
        n_paths: point.n_paths,
        iteration,
        nmse_db,
        wall_ms,
        status,
    };
    for &alg in &config.algorithms {
        match run_algorithm(&problem, alg, &local) {
            Ok(run) => {
                let per_iteration = kind == ExperimentKind::Convergence && alg != Algorithm::Somp;
                if per_iteration {
                    for (t, e) in run.nmse_trace.iter().enumerate() {
                        records.push(record(alg, t + 1, to_db(*e), run.wall_ms, RecordStatus::Ok));
                    }
                } else {
                    let iteration = if alg == Algorithm::Somp {
                        0
                    } else {
                        run.iterations
                    };
                    records.push(record(
                        alg,
                        iteration,
                        to_db(run.nmse),
                        run.wall_ms,
                        RecordStatus::Ok,
                    ));
                }
            }
            Err(Error::Divergence {
                iteration,
                quantity,
                value,
            }) => {
                log::warn!("{alg} diverged on trial {trial} at iteration {iteration}: {quantity} = {value}");
                records.push(record(
                    alg,
                    iteration.min(config.uamp.max_iters),
                    0.0,
                    0.0,
                    RecordStatus::Diverged,
                ));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(records)
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| invalid("threads", e.to_string()))?;
    Ok(pool.install(f))
}

/// Run every (point, trial) pair, handing records to `sink` point by point in
/// trial order.
pub fn run_experiment_with(
    config: &ExperimentConfig,
    kind: ExperimentKind,
    mut sink: impl FnMut(&ResultRecord) -> Result<()>,
) -> Result<()> {
    config.validate()?;
    let trials = if kind == ExperimentKind::Trajectory {
        1
    } else {
        config.n_trials
    };
    for point in sweep_points(config, kind) {
        let batches = with_pool(config.threads, || {
            (0..trials)
                .into_par_iter()
                .map(|t| trial_records(config, kind, point, t))
                .collect::<Result<Vec<_>>>()
        })??;
        for r in batches.iter().flatten() {
            sink(r)?;
        }
    }
    Ok(())
}

pub fn run_experiment(
    config: &ExperimentConfig,
    kind: ExperimentKind,
) -> Result<Vec<ResultRecord>> {
    let mut out = Vec::new();
    run_experiment_with(config, kind, |r| {
        out.push(r.clone());
        Ok(())
    })?;
    Ok(out)
}

/// Fraction of records flagged as diverged.
pub fn divergence_fraction(records: &[ResultRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let bad = records
        .iter()
        .filter(|r| r.status == RecordStatus::Diverged)
        .count();
    bad as f64 / records.len() as f64
}

/// Tabulated denoiser error and the predicted effective-noise sequence.
#[derive(Debug, Clone)]
pub struct SePrediction {
    pub table: MmseTable,
    pub trajectory: SeTrajectory,
}

/// Predict the estimator's effective noise per iteration on the operator and
/// noise level of trial 0. The denoiser table is built from angular-delay
/// signals of freshly generated scenes, at least `n_samples` entries in all.
pub fn predict_state_evolution(
    config: &ExperimentConfig,
    snr_db: f64,
    n_samples: usize,
) -> Result<SePrediction> {
    config.validate()?;
    let problem = build_trial(config, 0, snr_db)?;
    let unitary = problem.operator.svd_preprocess()?;

    // scenes for the table come from a stream family disjoint from the trials
    let draws = n_samples.div_ceil(config.n_unknowns()).max(1);
    let signals: Vec<CMatrix> = (0..draws)
        .map(|j| {
            let mut rng = trial_rng(config.seed ^ 0x5e5e_5e5e_5e5e_5e5e, j);
            let scene = generate_scene(&config.scene_config(), &problem.geometry, &mut rng)?;
            let h = assemble_channel(&scene, &problem.geometry, &problem.grid)?;
            Ok(problem.dictionary.angular().adjoint() * h.entries() * problem.dictionary.delay())
        })
        .collect::<Result<_>>()?;
    let variance = signals.iter().map(norm_sq).sum::<f64>() / (draws * config.n_unknowns()) as f64;
    let denoiser = DenoiserConfig {
        params: config.mrf,
        sweeps: config.mrf_sweeps,
        ..DenoiserConfig::default()
    };
    let mut next = 0;
    let mut rng = trial_rng(config.seed ^ 0xa5a5_a5a5_a5a5_a5a5, 0);
    let table = build_mmse_table(
        &denoiser,
        |_| {
            let x = signals[next % signals.len()].clone();
            next += 1;
            Ok(x)
        },
        &default_noise_grid(variance),
        n_samples,
        &mut rng,
    )?;
    let trajectory = se_trajectory(
        &table,
        &unitary.lambda_vec(),
        unitary.n_unknowns(),
        problem.noise_variance,
        config.uamp.max_iters,
    )?;
    Ok(SePrediction { table, trajectory })
}

/// Tab-delimited grid with a two-line header: dimensions, then meaning.
pub fn write_grid(path: &Path, grid: &RMatrix, meaning: &str) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!(
        "# {}\t{}\n# {}\n",
        grid.nrows(),
        grid.ncols(),
        meaning
    ));
    for r in 0..grid.nrows() {
        let row: Vec<String> = (0..grid.ncols())
            .map(|c| grid[(r, c)].to_string())
            .collect();
        out.push_str(&row.join("\t"));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_grid(path: &Path) -> Result<RMatrix> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let dims = lines.next().unwrap_or("");
    let parse_err = |line: usize, message: String| Error::Parse { line, message };
    let dims: Vec<usize> = dims
        .trim_start_matches('#')
        .split_whitespace()
        .map(|s| s.parse().map_err(|e| parse_err(1, format!("{e}"))))
        .collect::<Result<_>>()?;
    let [rows, cols] = dims[..] else {
        return Err(parse_err(1, "expected `# rows cols`".into()));
    };
    lines.next();
    let mut grid = RMatrix::zeros(rows, cols);
    for r in 0..rows {
        let line = lines
            .next()
            .ok_or_else(|| parse_err(r + 3, "missing row".into()))?;
        let vals: Vec<f64> = line
            .split('\t')
            .map(|s| s.parse().map_err(|e| parse_err(r + 3, format!("{e}"))))
            .collect::<Result<_>>()?;
        if vals.len() != cols {
            return Err(parse_err(
                r + 3,
                format!("{} columns, expected {cols}", vals.len()),
            ));
        }
        for (c, v) in vals.into_iter().enumerate() {
            grid[(r, c)] = v;
        }
    }
    Ok(grid)
}

fn magnitude(m: &CMatrix) -> RMatrix {
    m.map(|z| z.norm())
}

/// Write magnitude grids of the true and estimated channels for trial 0 at
/// the trajectory SNR, plus the scene. Returns the files written.
pub fn dump_trajectory(config: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    config.validate()?;
    fs::create_dir_all(dir)?;
    let problem = build_trial(config, 0, config.trajectory_snr_db)?;
    let mut written = Vec::new();
    let mut put = |name: &str, grid: &RMatrix, meaning: &str| -> Result<()> {
        let path = dir.join(name);
        write_grid(&path, grid, meaning)?;
        written.push(path);
        Ok(())
    };
    put(
        "x_true.tsv",
        &magnitude(&problem.angular_delay_truth()),
        "|X| true angular-delay channel; rows angle bins, columns delay bins",
    )?;
    put(
        "h_true.tsv",
        &magnitude(problem.channel.entries()),
        "|H| true spatial-frequency channel; rows antennas, columns subcarriers",
    )?;
    for &alg in &config.algorithms {
        let run = run_algorithm(&problem, alg, config)?;
        put(
            &format!("x_{}.tsv", alg.name()),
            &magnitude(&run.x_hat),
            &format!("|X| estimated by {alg}; rows angle bins, columns delay bins"),
        )?;
        put(
            &format!("h_{}.tsv", alg.name()),
            &magnitude(&run.h_hat),
            &format!("|H| estimated by {alg}; rows antennas, columns subcarriers"),
        )?;
    }
    let scene_path = dir.join("scene.txt");
    fs::write(&scene_path, scene_to_text(&problem.scene))?;
    written.push(scene_path);
    Ok(written)
}
