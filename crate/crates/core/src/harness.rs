//! Seeded Monte-Carlo sweeps over the banana and Lorenz '96 problems.
//!
//! Every run is keyed by `(experiment, sweep value, mc index)`. Runs execute
//! on a rayon pool of `workers` threads; records are collected and reduced in
//! key order, so the CSV does not depend on the worker count.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Deserialize;

use crate::ensemble::{ensemble_mean, gaussian_taper, Topology};
use crate::error::{check_dim, Error, Result};
use crate::filters::{analyze, Diagnostics, FilterConfig, FilterKind};
use crate::kernel_math::{bandwidth, gaussian_efficiency, KernelKind};
use crate::mixture::UpdateVariant;
use crate::models::{banana_measurement, banana_prior, l96_measurement, Lorenz96, PriorKind, L96_SPINUP};
use crate::sampling::{stream_key, RngStream};

/// Root-mean-square of the error vectors: `√(Σ‖x̂_i − x_i‖² / count)`.
pub fn spatial_rmse(estimates: &[DVector<f64>], truths: &[DVector<f64>]) -> Result<f64> {
    check_dim(truths.len(), estimates.len())?;
    if estimates.is_empty() {
        return Err(Error::InvalidArgument("RMSE of an empty list".into()));
    }
    let mut sum = 0.0;
    for (e, t) in estimates.iter().zip(truths) {
        check_dim(t.len(), e.len())?;
        sum += (e - t).norm_squared();
    }
    Ok((sum / estimates.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Banana,
    L96,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Banana => "banana",
            Experiment::L96 => "l96",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Experiment::Banana => 1,
            Experiment::L96 => 2,
        }
    }

    fn header(self) -> &'static str {
        match self {
            Experiment::Banana => "nsT,merrsEnEMF,merrsEnEMFUKF,merrsEnGMF,merrsEnKF",
            Experiment::L96 => "Ns,rmseEnEMF,rmseEnEMFUKF,rmseEnGMF,rmseEnKF",
        }
    }
}

const STREAM_TRUTH: u64 = 1;
const STREAM_ENSEMBLE: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_FILTER: u64 = 4;

/// Elliptical-slice iterations behind each banana truth draw.
pub const BANANA_TRUTH_CHAIN: usize = 2000;

/// Integer sweep written as `a:b` (inclusive), `a:b:step` or `a,b,c`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sweep(pub Vec<usize>);

impl FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse sweep {s:?}; expected a:b, a:b:step or a,b,c"));
        let parse = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
        let values = if s.contains(':') {
            let parts: Vec<&str> = s.split(':').collect();
            let (lo, hi, step) = match parts.as_slice() {
                [a, b] => (parse(a)?, parse(b)?, 1),
                [a, b, c] => (parse(a)?, parse(b)?, parse(c)?),
                _ => return Err(bad()),
            };
            if step == 0 || hi < lo {
                return Err(bad());
            }
            (lo..=hi).step_by(step).collect()
        } else {
            s.split(',').map(parse).collect::<Result<Vec<_>>>()?
        };
        if values.is_empty() || values.contains(&0) {
            return Err(Error::Config(format!("sweep {s:?} must list positive integers")));
        }
        Ok(Sweep(values))
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum SweepValue {
    Text(String),
    List(Vec<usize>),
}

impl SweepValue {
    fn resolve(self) -> Result<Vec<usize>> {
        match self {
            SweepValue::Text(s) => Ok(s.parse::<Sweep>()?.0),
            SweepValue::List(v) => {
                if v.is_empty() || v.contains(&0) {
                    return Err(Error::Config("sweep lists must hold positive integers".into()));
                }
                Ok(v)
            }
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FilterSection {
    s_e: Option<f64>,
    update: Option<String>,
    bruf_iterations: Option<usize>,
    alpha_inf: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FilterSections {
    enemf_g: Option<FilterSection>,
    enemf_u: Option<FilterSection>,
    engmf: Option<FilterSection>,
    enkf: Option<FilterSection>,
}

/// Contents of a TOML config file; every key is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    seed: Option<u64>,
    workers: Option<usize>,
    mc: Option<usize>,
    out: Option<PathBuf>,
    dims: Option<SweepValue>,
    particles: Option<usize>,
    ns: Option<SweepValue>,
    windows: Option<usize>,
    discard: Option<usize>,
    spinup: Option<f64>,
    prior: Option<String>,
    localization_radius: Option<f64>,
    #[serde(default)]
    filters: FilterSections,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

/// Command-line overrides, applied after the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub mc: Option<usize>,
    pub out: Option<PathBuf>,
    pub dims: Option<Sweep>,
    pub particles: Option<usize>,
    pub ns: Option<Sweep>,
    pub windows: Option<usize>,
    pub discard: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    /// In CSV column order: EnEMF-G, EnEMF-U, EnGMF, EnKF.
    pub filters: Vec<FilterConfig>,
    /// Dimensions (banana) or particle counts (Lorenz '96).
    pub sweep: Vec<usize>,
    pub mc_runs: usize,
    pub base_seed: u64,
    /// Banana ensemble size.
    pub n_particles: usize,
    pub prior: PriorKind,
    pub windows: usize,
    pub discard: usize,
    pub spinup: f64,
    pub localization_radius: Option<f64>,
    pub output_path: Option<PathBuf>,
    pub workers: usize,
}

impl ExperimentConfig {
    pub fn banana_default() -> Self {
        Self {
            experiment: Experiment::Banana,
            filters: vec![
                FilterConfig::enemf_gaussian(0.4, UpdateVariant::Ekf),
                FilterConfig::enemf_unscented(0.5, UpdateVariant::Ekf),
                FilterConfig::engmf(UpdateVariant::Ekf),
                FilterConfig::enkf(1.0),
            ],
            sweep: (1..=50).collect(),
            mc_runs: 500,
            base_seed: 0,
            n_particles: 100,
            prior: PriorKind::Gaussian,
            windows: 0,
            discard: 0,
            spinup: 0.0,
            localization_radius: None,
            output_path: None,
            workers: 1,
        }
    }

    pub fn l96_default() -> Self {
        let bruf = UpdateVariant::Bruf(5);
        Self {
            experiment: Experiment::L96,
            filters: vec![
                FilterConfig::enemf_gaussian(0.15, bruf),
                FilterConfig::enemf_unscented(2.5, bruf),
                FilterConfig::engmf(bruf),
                FilterConfig::enkf(1.01),
            ],
            sweep: (100..=500).step_by(50).collect(),
            mc_runs: 192,
            base_seed: 0,
            n_particles: 0,
            prior: PriorKind::Gaussian,
            windows: 2200,
            discard: 200,
            spinup: L96_SPINUP,
            localization_radius: Some(4.0),
            output_path: None,
            workers: 1,
        }
    }

    pub fn defaults(experiment: Experiment) -> Self {
        match experiment {
            Experiment::Banana => Self::banana_default(),
            Experiment::L96 => Self::l96_default(),
        }
    }

    /// Defaults, then the config file, then command-line overrides.
    pub fn resolve(experiment: Experiment, file: Option<ConfigFile>, cli: &Overrides) -> Result<Self> {
        let mut cfg = Self::defaults(experiment);
        if let Some(f) = file {
            cfg.apply_file(f)?;
        }
        cfg.apply_overrides(cli);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_file(&mut self, f: ConfigFile) -> Result<()> {
        set(&mut self.base_seed, f.seed);
        set(&mut self.workers, f.workers);
        set(&mut self.mc_runs, f.mc);
        if f.out.is_some() {
            self.output_path = f.out;
        }
        set(&mut self.windows, f.windows);
        set(&mut self.discard, f.discard);
        set(&mut self.spinup, f.spinup);
        let (sweep, other, other_name) = match self.experiment {
            Experiment::Banana => (f.dims, f.ns, "ns"),
            Experiment::L96 => (f.ns, f.dims, "dims"),
        };
        if other.is_some() {
            return Err(Error::Config(format!("`{other_name}` does not apply to the {} experiment", self.experiment.name())));
        }
        if let Some(s) = sweep {
            self.sweep = s.resolve()?;
        }
        if let Some(p) = f.particles {
            if self.experiment == Experiment::L96 {
                return Err(Error::Config("use `ns` for Lorenz '96 particle counts".into()));
            }
            self.n_particles = p;
        }
        if let Some(p) = f.prior {
            self.prior = match p.to_ascii_lowercase().as_str() {
                "gaussian" => PriorKind::Gaussian,
                "epanechnikov" => PriorKind::Epanechnikov,
                other => return Err(Error::Config(format!("unknown prior {other:?}"))),
            };
        }
        if let Some(r) = f.localization_radius {
            self.localization_radius = if r > 0.0 { Some(r) } else { None };
        }
        let sections = [f.filters.enemf_g, f.filters.enemf_u, f.filters.engmf, f.filters.enkf];
        for (cfg, section) in self.filters.iter_mut().zip(sections) {
            if let Some(s) = section {
                apply_filter_section(cfg, s)?;
            }
        }
        Ok(())
    }

    fn apply_overrides(&mut self, o: &Overrides) {
        set(&mut self.base_seed, o.seed);
        set(&mut self.workers, o.workers);
        set(&mut self.mc_runs, o.mc);
        if o.out.is_some() {
            self.output_path = o.out.clone();
        }
        set(&mut self.windows, o.windows);
        set(&mut self.discard, o.discard);
        set(&mut self.n_particles, o.particles);
        let sweep = match self.experiment {
            Experiment::Banana => &o.dims,
            Experiment::L96 => &o.ns,
        };
        if let Some(s) = sweep {
            self.sweep = s.0.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.mc_runs == 0 {
            return fail("mc must be at least 1".into());
        }
        if self.workers == 0 {
            return fail("workers must be at least 1".into());
        }
        if self.sweep.is_empty() || self.sweep.contains(&0) {
            return fail("sweep values must be positive".into());
        }
        for f in &self.filters {
            f.validate().map_err(|e| Error::Config(format!("{}: {e}", f.kind.name())))?;
        }
        match self.experiment {
            Experiment::Banana => {
                if self.n_particles < 2 {
                    return fail(format!("particles must be at least 2, got {}", self.n_particles));
                }
            }
            Experiment::L96 => {
                if self.sweep.iter().any(|&n| n < 2) {
                    return fail("particle counts must be at least 2".into());
                }
                if self.windows <= self.discard {
                    return fail(format!("windows ({}) must exceed discard ({})", self.windows, self.discard));
                }
                if !(self.spinup > 0.0) {
                    return fail("spinup must be positive".into());
                }
            }
        }
        if let Some(r) = self.localization_radius {
            if !(r > 0.0) {
                return fail("localization radius must be positive".into());
            }
        }
        Ok(())
    }

    /// The explicit output path or `./results/<experiment>-<timestamp>.csv`.
    pub fn output_path_or_default(&self) -> PathBuf {
        self.output_path
            .clone()
            .unwrap_or_else(|| default_output_path(self.experiment.name()))
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn apply_filter_section(cfg: &mut FilterConfig, s: FilterSection) -> Result<()> {
    let name = cfg.kind.name();
    if let Some(v) = s.s_e {
        if !cfg.kind.is_enemf() {
            return Err(Error::Config(format!("s_e does not apply to {name}")));
        }
        cfg.s_e = Some(v);
    }
    if let Some(a) = s.alpha_inf {
        if cfg.kind != FilterKind::EnKF {
            return Err(Error::Config(format!("alpha_inf does not apply to {name}")));
        }
        cfg.alpha_inf = a;
    }
    if cfg.kind == FilterKind::EnKF && (s.update.is_some() || s.bruf_iterations.is_some()) {
        return Err(Error::Config("the EnKF has no update variant".into()));
    }
    let iterations = s.bruf_iterations.unwrap_or(match cfg.update {
        UpdateVariant::Bruf(m) => m,
        UpdateVariant::Ekf => 5,
    });
    match s.update.as_deref().map(str::to_ascii_lowercase).as_deref() {
        None => {
            if let (Some(m), UpdateVariant::Bruf(_)) = (s.bruf_iterations, cfg.update) {
                cfg.update = UpdateVariant::Bruf(m);
            } else if s.bruf_iterations.is_some() {
                return Err(Error::Config(format!("bruf_iterations needs update = \"bruf\" for {name}")));
            }
        }
        Some("ekf") => cfg.update = UpdateVariant::Ekf,
        Some("bruf") => cfg.update = UpdateVariant::Bruf(iterations),
        Some(other) => return Err(Error::Config(format!("unknown update {other:?} for {name}"))),
    }
    Ok(())
}

pub fn default_output_path(experiment: &str) -> PathBuf {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    PathBuf::from("results").join(format!("{experiment}-{stamp}.csv"))
}

/// One filter on one `(sweep value, mc index)` run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub filter: FilterKind,
    pub sweep_value: usize,
    pub mc_index: usize,
    pub seed: u64,
    /// Banana: error norm of the posterior mean. Lorenz '96: spatio-temporal
    /// RMSE over the retained windows. `NaN` when diverged.
    pub rmse: f64,
    pub diverged: Option<String>,
    pub diagnostics: Diagnostics,
    pub singular_jacobians: u64,
}

/// Aggregated value for one `(filter, sweep value)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub value: f64,
    pub runs: usize,
    pub diverged: usize,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub config: ExperimentConfig,
    pub records: Vec<RunRecord>,
    /// `cells[s][f]` for sweep index `s` and filter index `f`.
    pub cells: Vec<Vec<CellSummary>>,
    pub wall_seconds: f64,
}

impl SweepResult {
    pub fn cell(&self, sweep_value: usize, kind: FilterKind) -> Option<&CellSummary> {
        let s = self.config.sweep.iter().position(|&v| v == sweep_value)?;
        let f = self.config.filters.iter().position(|c| c.kind == kind)?;
        Some(&self.cells[s][f])
    }

    pub fn csv(&self) -> String {
        let mut out = String::new();
        out.push_str(self.config.experiment.header());
        out.push('\n');
        for (s, row) in self.config.sweep.iter().zip(&self.cells) {
            write!(out, "{s}").expect("write to string");
            for c in row {
                write!(out, ",{:.16e}", c.value).expect("write to string");
            }
            out.push('\n');
        }
        out
    }

    pub fn summary(&self) -> String {
        let cfg = &self.config;
        let mut out = String::new();
        let w = &mut out;
        let _ = writeln!(w, "experiment: {}", cfg.experiment.name());
        let _ = writeln!(w, "base seed: {}", cfg.base_seed);
        let _ = writeln!(w, "workers: {}", cfg.workers);
        let _ = writeln!(w, "mc runs per sweep value: {}", cfg.mc_runs);
        let _ = writeln!(w, "sweep: {:?}", cfg.sweep);
        match cfg.experiment {
            Experiment::Banana => {
                let _ = writeln!(w, "particles: {}", cfg.n_particles);
                let _ = writeln!(w, "prior: {:?}", cfg.prior);
            }
            Experiment::L96 => {
                let _ = writeln!(w, "windows: {} (discarding {})", cfg.windows, cfg.discard);
                let _ = writeln!(w, "spinup: {}", cfg.spinup);
            }
        }
        let _ = writeln!(w, "localization radius: {:?}", cfg.localization_radius);
        for f in &cfg.filters {
            let _ = match f.kind {
                FilterKind::EnKF => writeln!(w, "filter {}: alpha_inf {}", f.kind.name(), f.alpha_inf),
                FilterKind::EnGMF => writeln!(w, "filter {}: update {:?}", f.kind.name(), f.update),
                _ => writeln!(w, "filter {}: update {:?}, s_E {:?}", f.kind.name(), f.update, f.s_e.unwrap_or(f64::NAN)),
            };
        }
        let _ = writeln!(w, "runs: {}", self.records.len());
        let diverged: Vec<&RunRecord> = self.records.iter().filter(|r| r.diverged.is_some()).collect();
        let _ = writeln!(w, "diverged runs: {}", diverged.len());
        for r in &diverged {
            let _ = writeln!(
                w,
                "  {} sweep={} mc={} seed={}: {}",
                r.filter.name(),
                r.sweep_value,
                r.mc_index,
                r.seed,
                r.diverged.as_deref().unwrap_or("")
            );
        }
        for (i, f) in cfg.filters.iter().enumerate() {
            let mut d = Diagnostics::default();
            let mut singular = 0;
            for r in self.records.iter().filter(|r| r.filter == cfg.filters[i].kind) {
                d.accumulate(&r.diagnostics);
                singular += r.singular_jacobians;
            }
            let _ = writeln!(
                w,
                "{}: jittered factorizations {}, uniform-weight fallbacks {}, radial fallbacks {}, singular Jacobians {}",
                f.kind.name(),
                d.jitter_count,
                d.underflow_fallbacks,
                d.radial_fallbacks,
                singular
            );
        }
        let _ = writeln!(w, "wall time: {:.3} s", self.wall_seconds);
        out
    }

    /// Writes the CSV and a `.summary.txt` sidecar; returns both paths.
    pub fn write(&self, path: &Path) -> Result<(PathBuf, PathBuf)> {
        write_with_sidecar(path, &self.csv(), &self.summary())
    }
}

fn write_with_sidecar(path: &Path, csv: &str, summary: &str) -> Result<(PathBuf, PathBuf)> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, csv)?;
    let sidecar = path.with_extension("summary.txt");
    fs::write(&sidecar, summary)?;
    Ok((path.to_path_buf(), sidecar))
}

fn filter_configs(cfg: &ExperimentConfig, n: usize) -> Result<Vec<FilterConfig>> {
    let taper = match cfg.localization_radius {
        Some(r) => Some(gaussian_taper(n, r, Topology::Ring)?),
        None => None,
    };
    Ok(cfg
        .filters
        .iter()
        .map(|f| {
            let mut f = f.clone();
            f.taper = taper.clone();
            f
        })
        .collect())
}

fn filter_stream(cfg: &ExperimentConfig, sweep_value: usize, mc: usize, filter_index: usize) -> RngStream {
    RngStream::new(
        cfg.base_seed,
        stream_key(&[cfg.experiment.tag(), sweep_value as u64, mc as u64, STREAM_FILTER, filter_index as u64]),
    )
}

fn diverged_record(kind: FilterKind, sweep_value: usize, mc: usize, seed: u64, why: String) -> RunRecord {
    RunRecord {
        filter: kind,
        sweep_value,
        mc_index: mc,
        seed,
        rmse: f64::NAN,
        diverged: Some(why),
        diagnostics: Diagnostics::default(),
        singular_jacobians: 0,
    }
}

/// One banana run. The observation is the fixed realization `y = 1`, so the
/// true state is drawn from the posterior it induces; all filters share one
/// prior ensemble.
fn banana_run(cfg: &ExperimentConfig, filters: &[FilterConfig], n: usize, mc: usize) -> Result<Vec<RunRecord>> {
    let key = |tag| RngStream::new(cfg.base_seed, stream_key(&[Experiment::Banana.tag(), n as u64, mc as u64, tag]));
    let prior = banana_prior(n, cfg.prior)?;
    let truth = prior.sample_posterior(&banana_measurement(n)?, BANANA_TRUTH_CHAIN, &mut key(STREAM_TRUTH))?;
    let ens = prior.sample_ensemble(cfg.n_particles, &mut key(STREAM_ENSEMBLE))?;
    Ok(filters
        .iter()
        .enumerate()
        .map(|(fi, f)| {
            // own operator instance so the singular-Jacobian count is per filter
            let meas = banana_measurement(n);
            let meas = match meas {
                Ok(m) => m,
                Err(e) => return diverged_record(f.kind, n, mc, cfg.base_seed, e.to_string()),
            };
            let mut rng = filter_stream(cfg, n, mc, fi);
            match analyze(&ens, &meas, f, &mut rng) {
                Ok(res) if res.posterior.is_finite() => {
                    let mean = ensemble_mean(&res.posterior).expect("non-empty posterior");
                    RunRecord {
                        filter: f.kind,
                        sweep_value: n,
                        mc_index: mc,
                        seed: cfg.base_seed,
                        rmse: (mean - &truth).norm(),
                        diverged: None,
                        diagnostics: res.diagnostics,
                        singular_jacobians: meas.operator().singular_jacobians(),
                    }
                }
                Ok(_) => diverged_record(f.kind, n, mc, cfg.base_seed, "non-finite posterior".into()),
                Err(e) => diverged_record(f.kind, n, mc, cfg.base_seed, e.to_string()),
            }
        })
        .collect())
}

/// One Lorenz '96 run at ensemble size `n_particles`: shared truth and
/// observations, one cycled filter per configuration.
fn l96_run(cfg: &ExperimentConfig, filters: &[FilterConfig], n_particles: usize, mc: usize) -> Result<Vec<RunRecord>> {
    let l96 = Lorenz96::default();
    // truth and noise do not depend on the ensemble size
    let shared = |tag| RngStream::new(cfg.base_seed, stream_key(&[Experiment::L96.tag(), 0, mc as u64, tag]));
    let truth0 = l96.spun_up_truth(cfg.spinup, &mut shared(STREAM_TRUTH))?;
    let ens0 = l96.initial_ensemble(
        &truth0,
        n_particles,
        &mut RngStream::new(
            cfg.base_seed,
            stream_key(&[Experiment::L96.tag(), n_particles as u64, mc as u64, STREAM_ENSEMBLE]),
        ),
    )?;
    let base = l96_measurement(l96.n)?;
    let mut noise = shared(STREAM_NOISE);
    let mut truths = Vec::with_capacity(cfg.windows);
    let mut observations = Vec::with_capacity(cfg.windows);
    let mut x = truth0;
    for _ in 0..cfg.windows {
        x = l96.step_window(&x)?;
        observations.push(base.simulate(&x, &mut noise));
        truths.push(x.clone());
    }
    Ok(filters
        .iter()
        .enumerate()
        .map(|(fi, f)| {
            let meas0 = l96_measurement(l96.n).expect("valid model");
            let mut rng = filter_stream(cfg, n_particles, mc, fi);
            let mut ens = ens0.clone();
            let mut diagnostics = Diagnostics::default();
            let mut estimates = Vec::with_capacity(cfg.windows - cfg.discard);
            for (k, (y, _)) in observations.iter().zip(&truths).enumerate() {
                let step = l96
                    .propagate_ensemble(&ens, l96.window)
                    .and_then(|prior| {
                        let meas = meas0.with_observation(y.clone())?;
                        analyze(&prior, &meas, f, &mut rng)
                    });
                match step {
                    Ok(res) if res.posterior.is_finite() => {
                        diagnostics.accumulate(&res.diagnostics);
                        ens = res.posterior;
                    }
                    Ok(_) => {
                        return diverged_record(f.kind, n_particles, mc, cfg.base_seed, format!("non-finite ensemble at window {}", k + 1))
                    }
                    Err(e) => {
                        return diverged_record(f.kind, n_particles, mc, cfg.base_seed, format!("window {}: {e}", k + 1))
                    }
                }
                if k >= cfg.discard {
                    estimates.push(ensemble_mean(&ens).expect("non-empty ensemble"));
                }
            }
            let rmse = spatial_rmse(&estimates, &truths[cfg.discard..]).expect("aligned lists");
            RunRecord {
                filter: f.kind,
                sweep_value: n_particles,
                mc_index: mc,
                seed: cfg.base_seed,
                rmse,
                diverged: if rmse.is_finite() { None } else { Some("non-finite RMSE".into()) },
                diagnostics,
                singular_jacobians: meas0.operator().singular_jacobians(),
            }
        })
        .collect())
}

/// Runs the configured sweep and reduces the records in key order.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let start = Instant::now();
    let units: Vec<(usize, usize)> = cfg
        .sweep
        .iter()
        .flat_map(|&s| (0..cfg.mc_runs).map(move |mc| (s, mc)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
    let per_unit: Vec<Vec<RunRecord>> = pool.install(|| {
        units
            .par_iter()
            .map(|&(s, mc)| match cfg.experiment {
                Experiment::Banana => banana_run(cfg, &filter_configs(cfg, s)?, s, mc),
                Experiment::L96 => l96_run(cfg, &filter_configs(cfg, Lorenz96::default().n)?, s, mc),
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let records: Vec<RunRecord> = per_unit.into_iter().flatten().collect();
    let cells = cfg
        .sweep
        .iter()
        .map(|&s| {
            cfg.filters
                .iter()
                .map(|f| {
                    let runs: Vec<&RunRecord> = records
                        .iter()
                        .filter(|r| r.sweep_value == s && r.filter == f.kind)
                        .collect();
                    let ok: Vec<f64> = runs.iter().filter(|r| r.diverged.is_none()).map(|r| r.rmse).collect();
                    let value = if ok.is_empty() {
                        f64::NAN
                    } else {
                        match cfg.experiment {
                            // root-mean-square over Monte-Carlo realizations
                            Experiment::Banana => (ok.iter().map(|e| e * e).sum::<f64>() / ok.len() as f64).sqrt(),
                            Experiment::L96 => ok.iter().sum::<f64>() / ok.len() as f64,
                        }
                    };
                    CellSummary {
                        value,
                        runs: runs.len(),
                        diverged: runs.len() - ok.len(),
                    }
                })
                .collect()
        })
        .collect();
    Ok(SweepResult {
        config: cfg.clone(),
        records,
        cells,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Rows `(n, h_N, h_E, eff_N)` at ensemble size `n_particles`.
pub fn kernel_table(dims: &[usize], n_particles: usize) -> Result<String> {
    let mut out = String::from("n,bandwidth_gauss,bandwidth_epan,eff_gauss\n");
    for &n in dims {
        let hn = bandwidth(KernelKind::Gaussian, n, n_particles)?;
        let he = bandwidth(KernelKind::Epanechnikov, n, n_particles)?;
        let eff = gaussian_efficiency(n)?;
        writeln!(out, "{n},{hn:.16e},{he:.16e},{eff:.16e}").expect("write to string");
    }
    Ok(out)
}

/// Writes the kernel table and a short sidecar.
pub fn write_kernel_table(path: &Path, dims: &[usize], n_particles: usize) -> Result<(PathBuf, PathBuf)> {
    let csv = kernel_table(dims, n_particles)?;
    let summary = format!("experiment: kernel-table\ndims: {dims:?}\nparticles: {n_particles}\n");
    write_with_sidecar(path, &csv, &summary)
}
