//! Named experiments, output handling and the run manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use nalgebra::DMatrix;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{CheckStatus, ScenarioConfig, ScenarioKind};
use crate::error::{EngineError, Result};
use crate::fock::{build_hamiltonian, gibbs_state, DensityMatrix, FockDims, ModelKind};
use crate::langevin::power_crossover_sweep;
use crate::lindblad::{engine_baths, propagate_observed, CycleStatus, LindbladGenerator, PropagationOptions, RunHealth};
use crate::observables::{axial_number_rate, expectations_of_snapshot, ObservableTrace, ModeMoments};
use crate::otto::{run_engine_observed, run_otto, work_vs_radius, EngineRun};
use crate::scalar::Cplx;
use crate::trap::EngineParams;
use crate::wigner::{axis, wigner};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Writes to a hidden temporary file beside `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| EngineError::Config(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvariantStatus {
    pub name: String,
    pub status: CheckStatus,
    /// Hard invariants decide the exit status; soft ones are reported only.
    pub hard: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub scenario: String,
    pub code_version: String,
    pub config: ScenarioConfig,
    pub started_unix_s: u64,
    pub wall_clock_s: f64,
    pub threads: usize,
    pub completed: bool,
    pub error: Option<String>,
    pub invariants: Vec<InvariantStatus>,
    pub warnings: Vec<String>,
    pub files: Vec<FileEntry>,
}

impl RunManifest {
    /// True when the scenario completed and no hard invariant failed.
    pub fn hard_ok(&self) -> bool {
        self.completed && self.invariants.iter().all(|i| !(i.hard && i.status == CheckStatus::Fail))
    }

    pub fn invariant(&self, name: &str) -> Option<&InvariantStatus> {
        self.invariants.iter().find(|i| i.name == name)
    }
}

/// Output directory plus the list of files written into it.
pub struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.dir.join(name), bytes)?;
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        Ok(())
    }

    fn with<F: FnOnce(&mut Vec<u8>) -> Result<()>>(&mut self, name: &str, fill: F) -> Result<()> {
        let mut buf = Vec::new();
        fill(&mut buf)?;
        self.write(name, &buf)
    }

    fn json<S: Serialize>(&mut self, name: &str, value: &S) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    fn inventory(&self) -> Result<Vec<FileEntry>> {
        let mut names = self.files.clone();
        names.sort();
        names
            .into_iter()
            .map(|name| {
                let bytes = fs::read(self.dir.join(&name))?;
                Ok(FileEntry { path: name, bytes: bytes.len() as u64, sha256: hex::encode(Sha256::digest(&bytes)) })
            })
            .collect()
    }
}

/// Collects invariant outcomes and warnings during a run.
#[derive(Debug, Default)]
pub struct Monitor {
    pub invariants: Vec<InvariantStatus>,
    pub warnings: Vec<String>,
}

impl Monitor {
    pub fn record(&mut self, name: impl Into<String>, hard: bool, ok: bool, detail: impl Into<String>) {
        let status = match (ok, hard) {
            (true, _) => CheckStatus::Pass,
            (false, true) => CheckStatus::Fail,
            (false, false) => CheckStatus::Warn,
        };
        self.invariants.push(InvariantStatus { name: name.into(), status, hard, detail: detail.into() });
    }

    pub fn warn(&mut self, msg: impl Into<String>) {
        self.warnings.push(msg.into());
    }

    pub fn health(&mut self, label: &str, h: &RunHealth, trace_tol: f64) {
        self.record(
            format!("{label}: trace"),
            true,
            h.max_trace_error < trace_tol,
            format!("max |Tr rho - 1| = {:.2e} over {} steps", h.max_trace_error, h.steps),
        );
        self.record(
            format!("{label}: positivity"),
            true,
            h.positivity_failures == 0,
            format!("{} of {} eigenvalue checks failed", h.positivity_failures, h.positivity_checks),
        );
    }

    pub fn uncertainty(&mut self, label: &str, trace: &ObservableTrace<f64>) {
        let m = trace.min_uncertainty_product();
        self.record(
            format!("{label}: uncertainty"),
            true,
            m >= 1.0 / 16.0 - 1e-6,
            format!("min var_qr var_pr = {m:.6}"),
        );
    }

    pub fn engine_run(&mut self, label: &str, run: &EngineRun<f64>, trace_tol: f64) {
        self.health(label, &run.health, trace_tol);
        self.uncertainty(label, &run.trace);
        let (r, z) = run.top_populations;
        self.record(
            format!("{label}: top-level population"),
            false,
            r.max(z) < 1e-3,
            format!("radial {r:.2e}, axial {z:.2e}"),
        );
        self.record(
            format!("{label}: limit cycle"),
            false,
            run.status == CycleStatus::Converged,
            format!("periodicity residuals {:?}", run.residuals),
        );
    }
}

/// Runs the configured scenario into `out_dir`. Invalid configurations are
/// rejected before anything is written; runtime failures still produce a
/// manifest, with `completed = false`.
pub fn run(config: &ScenarioConfig, out_dir: &Path) -> Result<RunManifest> {
    let report = config.validate();
    if !report.ok() {
        let msg: Vec<String> = report.failures().map(|c| format!("{}: {}", c.name, c.detail)).collect();
        return Err(EngineError::Config(msg.join("; ")));
    }
    let params = config.params()?;
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let clock = Instant::now();
    let mut out = Outputs::new(out_dir)?;
    let mut mon = Monitor::default();
    for c in report.checks.iter().filter(|c| c.status == CheckStatus::Warn) {
        mon.warn(format!("validate {}: {}", c.name, c.detail));
    }

    let result = dispatch(config, &params, &mut out, &mut mon).and_then(|_| hygiene(config, &params, &mut mon));
    let (completed, error) = match result {
        Ok(()) => (true, None),
        Err(e) => {
            mon.record("completed", true, false, e.to_string());
            (false, Some(e.to_string()))
        }
    };
    let mut manifest = RunManifest {
        scenario: config.scenario.name().to_string(),
        code_version: CODE_VERSION.to_string(),
        config: config.clone(),
        started_unix_s: started,
        wall_clock_s: clock.elapsed().as_secs_f64(),
        threads: rayon::current_num_threads(),
        completed,
        error,
        invariants: mon.invariants,
        warnings: mon.warnings,
        files: out.inventory()?,
    };
    manifest.wall_clock_s = clock.elapsed().as_secs_f64();
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    write_atomic(&out_dir.join("manifest.json"), &bytes)?;
    Ok(manifest)
}

fn dispatch(config: &ScenarioConfig, params: &EngineParams<f64>, out: &mut Outputs, mon: &mut Monitor) -> Result<()> {
    match config.scenario {
        ScenarioKind::Fig2 => fig2(config, params, out, mon),
        ScenarioKind::Squeezing => squeezing(config, params, out, mon),
        ScenarioKind::Wigner => wigner_scenario(config, params, out, mon),
        ScenarioKind::Otto => otto(config, params, out, mon),
        ScenarioKind::WorkSweep => work_sweep(config, params, out, mon),
        ScenarioKind::Crossover => crossover(config, params, out, mon),
    }
}

fn trace_tol(config: &ScenarioConfig, params: &EngineParams<f64>) -> f64 {
    config.propagation(params).tolerances.trace
}

/// Free propagation of one model from the Gibbs state at T_0.
pub fn model_trace(
    params: &EngineParams<f64>,
    model: ModelKind,
    dims: FockDims,
    t_end: f64,
    prop: PropagationOptions<f64>,
) -> Result<(ObservableTrace<f64>, RunHealth)> {
    let h = build_hamiltonian(model, params, dims)?;
    let rho0 = gibbs_state(&h, params.t_0)?;
    let mut trace = ObservableTrace::new();
    let res = propagate_observed(&h, rho0, &engine_baths(params), t_end, prop, |s| {
        trace.push(expectations_of_snapshot(s))
    })?;
    Ok((trace, res.health))
}

fn fig2(config: &ScenarioConfig, params: &EngineParams<f64>, out: &mut Outputs, mon: &mut Monitor) -> Result<()> {
    let dims = config.dims()?;
    let t_end = config.integrator.duration_axial_periods * params.axial_period();
    let prop = config.propagation(params);
    let runs: Vec<(ModelKind, Result<(ObservableTrace<f64>, RunHealth)>)> = {
        use rayon::prelude::*;
        config.models.par_iter().map(|&m| (m, model_trace(params, m, dims, t_end, prop))).collect()
    };
    let mut traces = Vec::new();
    for (model, r) in runs {
        let (trace, health) = r?;
        mon.health(model.label(), &health, trace_tol(config, params));
        mon.uncertainty(model.label(), &trace);
        out.with(&format!("trace_{}.csv", model.label()), |b| trace.write_csv(b, params))?;
        traces.push((model, trace));
    }
    let n = traces[0].1.len();
    if traces.iter().any(|(_, t)| t.len() != n) {
        return Err(EngineError::Config("model traces have different time grids".into()));
    }
    out.with("fig2.csv", |b| {
        let mut w = csv::Writer::from_writer(b);
        let mut head = vec!["scaled_time".to_string()];
        head.extend(traces.iter().map(|(m, _)| format!("n_z_{}", m.label())));
        w.write_record(&head)?;
        for k in 0..n {
            let t = traces[0].1.rows[k].time;
            let mut rec = vec![format!("{}", params.omega_z * t / std::f64::consts::TAU)];
            rec.extend(traces.iter().map(|(_, tr)| format!("{}", tr.rows[k].n_z)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    })
}

/// Largest Ehrenfest mismatch of d<n_z>/dt over a set of points, both
/// pointwise-relative (where |rate| exceeds 5% of its maximum) and relative
/// to the maximum rate.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EhrenfestCheck {
    pub max_pointwise_rel: f64,
    pub max_scaled: f64,
    pub max_rate: f64,
}

impl EhrenfestCheck {
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Self {
        let max_rate = pairs.iter().map(|p| p.0.abs()).fold(0.0, f64::max);
        let mut pointwise: f64 = 0.0;
        let mut scaled: f64 = 0.0;
        for &(exact, formula) in pairs {
            let d = (exact - formula).abs();
            scaled = scaled.max(d / max_rate.max(f64::MIN_POSITIVE));
            if exact.abs() > 0.05 * max_rate {
                pointwise = pointwise.max(d / exact.abs());
            }
        }
        Self { max_pointwise_rel: pointwise, max_scaled: scaled, max_rate }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SqueezingSummary {
    pub min_var_qr: f64,
    pub min_var_pr: f64,
    pub squeezing_window: bool,
    pub min_uncertainty_product: f64,
    pub ehrenfest: EhrenfestCheck,
    pub mean_power_w: f64,
}

/// Limit cycle of the full model with the Ehrenfest rate compared against
/// the generator at every snapshot.
pub fn squeezing_run(
    config: &ScenarioConfig,
    params: &EngineParams<f64>,
) -> Result<(EngineRun<f64>, SqueezingSummary)> {
    let opts = config.engine_run(params, ModelKind::Cm)?;
    let h = build_hamiltonian(ModelKind::Cm, params, opts.dims)?;
    let gen = LindbladGenerator::new(&h, &engine_baths(params))?;
    let mut pairs = Vec::new();
    let run = run_engine_observed(params, &opts, |s| {
        let row = expectations_of_snapshot(s);
        pairs.push((axial_number_rate(&gen, s.rho), row.ehrenfest_rate(params)));
    })?;
    let col = |f: fn(&crate::observables::ObservableRow<f64>) -> f64| run.trace.rows.iter().map(f).fold(f64::INFINITY, f64::min);
    let min_var_qr = col(|r| r.var_qr);
    let min_var_pr = col(|r| r.var_pr);
    let summary = SqueezingSummary {
        min_var_qr,
        min_var_pr,
        squeezing_window: min_var_qr.min(min_var_pr) < 0.25,
        min_uncertainty_product: run.trace.min_uncertainty_product(),
        ehrenfest: EhrenfestCheck::from_pairs(&pairs),
        mean_power_w: run.trace.mean_power(params),
    };
    Ok((run, summary))
}

fn squeezing(config: &ScenarioConfig, params: &EngineParams<f64>, out: &mut Outputs, mon: &mut Monitor) -> Result<()> {
    let (run, summary) = squeezing_run(config, params)?;
    mon.engine_run("cm", &run, trace_tol(config, params));
    let e = summary.ehrenfest;
    mon.record(
        "ehrenfest",
        true,
        e.max_pointwise_rel < 0.01 && e.max_scaled < 0.01,
        format!("pointwise rel {:.2e}, scaled {:.2e}", e.max_pointwise_rel, e.max_scaled),
    );
    if !summary.squeezing_window {
        mon.warn(format!("no squeezing window: min variance {:.4}", summary.min_var_qr.min(summary.min_var_pr)));
    }
    if summary.mean_power_w < 0.0 {
        mon.warn(format!("cycle-averaged P_dis negative: {:e} W", summary.mean_power_w));
    }
    out.with("trace.csv", |b| run.trace.write_csv(b, params))?;
    out.json("squeezing.json", &summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct WignerRow {
    pub beta_khz: f64,
    pub covariance_ratio: f64,
    pub grid_axis_ratio: f64,
    pub normalization: f64,
    pub var_qr: f64,
    pub var_pr: f64,
    pub error: Option<String>,
}

/// Radial state at `phase` of the converged cycle, plus the run itself.
pub fn radial_state_at_phase(
    config: &ScenarioConfig,
    params: &EngineParams<f64>,
    phase: f64,
) -> Result<(EngineRun<f64>, DMatrix<Cplx<f64>>)> {
    let opts = config.engine_run(params, ModelKind::Cm)?;
    let target = (opts.cycles as f64 - 1.0 + phase.clamp(0.0, 1.0)) * params.heating_period;
    let mut state: Option<DMatrix<Cplx<f64>>> = None;
    let run = run_engine_observed(params, &opts, |s| {
        if state.is_none() && s.time >= target - 1e-15 * params.heating_period {
            state = Some(s.rho.radial_state());
        }
    })?;
    let state = state.ok_or_else(|| EngineError::Domain(format!("no snapshot at cycle phase {phase}")))?;
    Ok((run, state))
}

fn wigner_scenario(config: &ScenarioConfig, params: &EngineParams<f64>, out: &mut Outputs, mon: &mut Monitor) -> Result<()> {
    let betas = config.sweep.beta_khz.clone().unwrap_or_else(|| vec![10.0, 100.0, 200.0]);
    let grid = axis(config.wigner.half_width, config.wigner.points);
    let mut rows = Vec::new();
    for b in betas {
        let p = params.with_beta(crate::units::hz_to_angular(b * 1e3));
        let label = format!("beta {b} kHz");
        let mut row = WignerRow {
            beta_khz: b,
            covariance_ratio: f64::NAN,
            grid_axis_ratio: f64::NAN,
            normalization: f64::NAN,
            var_qr: f64::NAN,
            var_pr: f64::NAN,
            error: None,
        };
        match p.validate().and_then(|_| radial_state_at_phase(config, &p, config.wigner.cycle_phase)) {
            Ok((run, rho)) => {
                mon.engine_run(&label, &run, trace_tol(config, &p));
                let m = ModeMoments::from_state(&rho);
                row.covariance_ratio = m.eccentricity();
                row.var_qr = m.var_x();
                row.var_pr = m.var_p();
                let w = wigner(&rho, &grid, &grid)?;
                row.grid_axis_ratio = w.axis_ratio();
                row.normalization = w.normalization();
                out.with(&format!("wigner_{b}khz.csv"), |buf| w.write_csv(buf))?;
            }
            Err(e) => {
                mon.warn(format!("{label}: {e}"));
                row.error = Some(e.to_string());
            }
        }
        rows.push(row);
    }
    out.with("wigner_summary.csv", |b| {
        let mut w = csv::Writer::from_writer(b);
        w.write_record(["beta_khz", "covariance_ratio", "grid_axis_ratio", "normalization", "var_qr", "var_pr", "error"])?;
        for r in &rows {
            w.write_record([
                format!("{}", r.beta_khz),
                format!("{}", r.covariance_ratio),
                format!("{}", r.grid_axis_ratio),
                format!("{}", r.normalization),
                format!("{}", r.var_qr),
                format!("{}", r.var_pr),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    })
}

fn otto(config: &ScenarioConfig, params: &EngineParams<f64>, out: &mut Outputs, mon: &mut Monitor) -> Result<()> {
    let opts = config.engine_run(params, ModelKind::Cm)?;
    let (run, record) = run_otto(params, &opts)?;
    mon.engine_run("cm", &run, trace_tol(config, params));
    for w in &record.warnings {
        mon.warn(w.clone());
    }
    if record.degenerate {
        mon.warn("loop degenerate: W_net set to 0");
    }
    mon.record(
        "isochores",
        false,
        record.hot_isochore_variation < 0.1 && record.cold_isochore_variation < 0.1,
        format!(
            "omega_eff variation hot {:.3}, cold {:.3}",
            record.hot_isochore_variation, record.cold_isochore_variation
        ),
    );
    out.with("trace.csv", |b| run.trace.write_csv(b, params))?;
    out.with("energy_frequency.csv", |b| record.write_energy_frequency_csv(b, params.omega_z))?;
    out.with("entropy_temperature.csv", |b| record.write_entropy_temperature_csv(b, params.omega_z))?;
    #[derive(Serialize)]
    struct Summary<'a> {
        w_net_hbar_omega_z: f64,
        w_net_j: f64,
        w_ts_polygon_hbar_omega_z: f64,
        q_in_hbar_omega_z: f64,
        q_in_j: f64,
        efficiency: f64,
        power_w: f64,
        period_s: f64,
        hot_isochore_variation: f64,
        cold_isochore_variation: f64,
        degenerate: bool,
        warnings: &'a [String],
    }
    out.json(
        "otto.json",
        &Summary {
            w_net_hbar_omega_z: record.w_net,
            w_net_j: record.w_net_joule,
            w_ts_polygon_hbar_omega_z: record.w_ts_polygon,
            q_in_hbar_omega_z: record.q_in,
            q_in_j: record.q_in_joule,
            efficiency: record.efficiency,
            power_w: record.power_w,
            period_s: record.period,
            hot_isochore_variation: record.hot_isochore_variation,
            cold_isochore_variation: record.cold_isochore_variation,
            degenerate: record.degenerate,
            warnings: &record.warnings,
        },
    )
}

fn work_sweep(config: &ScenarioConfig, params: &EngineParams<f64>, out: &mut Outputs, mon: &mut Monitor) -> Result<()> {
    let geom = config.geometry()?.ok_or_else(|| EngineError::Config("work-sweep needs a trap section".into()))?;
    let radii_um = config.sweep.r0_um.clone().unwrap_or_else(|| vec![2.0, 4.0, 6.0, 8.0, 10.0, 14.0, 20.0]);
    let radii: Vec<f64> = radii_um.iter().map(|r| r * 1e-6).collect();
    let opts = config.engine_run(params, ModelKind::Cm)?;
    let rows = work_vs_radius(&geom, params, &radii, &opts);
    for r in &rows {
        if let Some(e) = &r.error {
            mon.warn(format!("r0 = {} um: {e}", r.r0_um));
        }
    }
    out.with("work_vs_radius.csv", |b| crate::otto::write_radius_csv(&rows, b))
}

fn crossover(config: &ScenarioConfig, params: &EngineParams<f64>, out: &mut Outputs, mon: &mut Monitor) -> Result<()> {
    let betas_khz = config.sweep.beta_khz.clone().unwrap_or_else(|| vec![0.0, 5.0, 10.0, 20.0, 50.0, 100.0]);
    let betas: Vec<f64> = betas_khz.iter().map(|b| crate::units::hz_to_angular(b * 1e3)).collect();
    let quantum = config.engine_run(params, ModelKind::Cm)?;
    let classical = config.ensemble(params, params.heating_period);
    let table = power_crossover_sweep(&betas, params, &quantum, &classical)?;
    for r in &table.rows {
        if let Some(e) = &r.error {
            mon.warn(format!("beta = {} kHz: {e}", r.beta_khz));
        }
    }
    out.with("crossover.csv", |b| table.write_csv(b))?;
    out.json("crossover.json", &table)
}

/// Truncation and time-step convergence, run after every scenario.
fn hygiene(config: &ScenarioConfig, params: &EngineParams<f64>, mon: &mut Monitor) -> Result<()> {
    let dims = config.dims()?;
    let prop = config.propagation(params);
    let model = config.models.first().copied().unwrap_or(ModelKind::Cm);
    if config.hygiene.truncation {
        let t_end = config.hygiene.truncation_axial_periods * params.axial_period();
        let rel = truncation_convergence(params, model, dims, t_end, prop)?;
        mon.record(
            "truncation convergence",
            false,
            rel < 0.01,
            format!("max relative change of n_r, n_z under (n_r+4, n_z+4): {rel:.2e}"),
        );
    }
    if config.hygiene.dt_order {
        let order = dt_order(params, model, dims, prop)?;
        mon.record(
            "dt convergence",
            true,
            order.at_design_order(),
            format!("errors {:.2e}, {:.2e}; observed order {:.2}", order.errors[0], order.errors[1], order.order),
        );
    }
    Ok(())
}

/// Largest change of n_r(t), n_z(t) relative to their maxima when both
/// truncations grow by four levels.
pub fn truncation_convergence(
    params: &EngineParams<f64>,
    model: ModelKind,
    dims: FockDims,
    t_end: f64,
    prop: PropagationOptions<f64>,
) -> Result<f64> {
    let big = FockDims::new(dims.n_r + 4, dims.n_z + 4)?;
    let (a, b) = rayon::join(
        || model_trace(params, model, dims, t_end, prop),
        || model_trace(params, model, big, t_end, prop),
    );
    let (a, _) = a?;
    let (b, _) = b?;
    if a.len() != b.len() {
        return Err(EngineError::Domain("truncation runs have different time grids".into()));
    }
    let mut worst: f64 = 0.0;
    for f in [|r: &crate::observables::ObservableRow<f64>| r.n_r, |r: &crate::observables::ObservableRow<f64>| r.n_z] {
        let xa = a.column(f);
        let xb = b.column(f);
        let scale = xb.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-12);
        for (p, q) in xa.iter().zip(&xb) {
            worst = worst.max((p - q).abs() / scale);
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct DtOrder {
    /// |rho_dt - rho_dt/2| and |rho_dt/2 - rho_dt/4| at the end of the run.
    pub errors: [f64; 2],
    pub order: f64,
}

impl DtOrder {
    /// Fourth order within tolerance, or both differences at round-off level.
    pub fn at_design_order(&self) -> bool {
        self.order >= 3.5 || self.errors[0] < 1e-12
    }
}

/// Observed convergence order of the propagator over a twentieth of an
/// axial period from the Gibbs state, heating on, at dt, dt/2 and dt/4.
pub fn dt_order(
    params: &EngineParams<f64>,
    model: ModelKind,
    dims: FockDims,
    prop: PropagationOptions<f64>,
) -> Result<DtOrder> {
    let h = build_hamiltonian(model, params, dims)?;
    let rho0 = gibbs_state(&h, params.t_0)?;
    let t_end = 0.05 * params.axial_period();
    let dt = prop.dt_max;
    let finals: Vec<DensityMatrix<f64>> = [dt, dt / 2.0, dt / 4.0]
        .into_iter()
        .map(|d| {
            let o = PropagationOptions { dt_max: d, snapshot_stride: usize::MAX, positivity_interval: 0, ..prop };
            let mut last = None;
            propagate_observed(&h, rho0.clone(), &engine_baths(params), t_end, o, |s| last = Some(s.rho.clone()))?;
            last.ok_or_else(|| EngineError::Domain("no final snapshot".into()))
        })
        .collect::<Result<_>>()?;
    let e1 = finals[0].max_abs_diff(&finals[1]);
    let e2 = finals[1].max_abs_diff(&finals[2]);
    Ok(DtOrder { errors: [e1, e2], order: (e1 / e2.max(f64::MIN_POSITIVE)).log2() })
}
