//! Scenario configuration file (JSON) and its static validation.
//!
//! Frequencies and rates are given as ordinary frequencies with the unit in
//! the key (`_khz`, `_hz`), temperatures in microkelvin, lengths in
//! micrometres. Everything is converted to rad/s, kelvin and metres here.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{EngineError, Result};
use crate::fock::{build_hamiltonian, FockDims, ModelKind};
use crate::langevin::{AxialDrive, EnsembleOptions};
use crate::lindblad::{engine_baths, LindbladGenerator, PropagationOptions};
use crate::otto::{EngineRunOptions, StrokeWindows};
use crate::trap::{compute_beta, planck_occupation, BathRates, EngineParams, Temperatures, TrapGeometry};
use crate::units::{hz_to_angular, AMU};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    Fig2,
    Squeezing,
    Wigner,
    Otto,
    WorkSweep,
    Crossover,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 6] = [
        ScenarioKind::Fig2,
        ScenarioKind::Squeezing,
        ScenarioKind::Wigner,
        ScenarioKind::Otto,
        ScenarioKind::WorkSweep,
        ScenarioKind::Crossover,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ScenarioKind::Fig2 => "fig2",
            ScenarioKind::Squeezing => "squeezing",
            ScenarioKind::Wigner => "wigner",
            ScenarioKind::Otto => "otto",
            ScenarioKind::WorkSweep => "work-sweep",
            ScenarioKind::Crossover => "crossover",
        }
    }
}

impl std::str::FromStr for ScenarioKind {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| EngineError::Config(format!("unknown scenario `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrapSection {
    pub theta_deg: f64,
    pub r0_um: f64,
    #[serde(default = "default_mass")]
    pub mass_amu: f64,
}

fn default_mass() -> f64 {
    40.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSection {
    pub radial_frequency_khz: f64,
    pub axial_frequency_khz: f64,
    /// Overrides the value derived from the trap section.
    pub beta_khz: Option<f64>,
    pub kappa_a_khz: f64,
    pub kappa_h_khz: f64,
    pub kappa_b_khz: f64,
    pub t_hot_uk: f64,
    pub t_cold_uk: f64,
    pub t_axial_uk: f64,
    pub t_initial_uk: f64,
    /// Defaults to two axial periods.
    pub heating_period_us: Option<f64>,
    /// Heating period in units of the axial period; alternative to `heating_period_us`.
    pub heating_period_axial: Option<f64>,
    #[serde(default = "default_duty")]
    pub heating_duty: f64,
    /// Optional stated occupations, checked against the Planck formula.
    pub nbar_hot: Option<f64>,
    pub nbar_cold: Option<f64>,
    pub nbar_axial: Option<f64>,
}

fn default_duty() -> f64 {
    0.5
}

impl Default for EngineSection {
    fn default() -> Self {
        Self {
            radial_frequency_khz: 1000.0,
            axial_frequency_khz: 50.0,
            beta_khz: Some(100.0),
            kappa_a_khz: 200.0,
            kappa_h_khz: 200.0,
            kappa_b_khz: 50.0,
            t_hot_uk: 166.0,
            t_cold_uk: 4.0,
            t_axial_uk: 4.0,
            t_initial_uk: 10.0,
            heating_period_us: None,
            heating_period_axial: None,
            heating_duty: 0.5,
            nbar_hot: None,
            nbar_cold: None,
            nbar_axial: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorSection {
    /// RK4 step in units of 1/omega_r.
    pub dt_omega_r: f64,
    pub cycles: usize,
    pub snapshot_stride: usize,
    pub residual_threshold: f64,
    pub positivity_interval: usize,
    /// Length of free propagation runs (fig2) in axial periods.
    pub duration_axial_periods: f64,
}

impl Default for IntegratorSection {
    fn default() -> Self {
        Self {
            dt_omega_r: 0.05,
            cycles: 2,
            snapshot_stride: 20,
            residual_threshold: 1e-6,
            positivity_interval: 50,
            duration_axial_periods: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSection {
    pub trajectories: usize,
    pub seed: u64,
    /// Euler-Maruyama step in units of 1/omega_r.
    pub dt_omega_r: f64,
    pub record_stride: usize,
    pub axial_drive: AxialDrive,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        Self { trajectories: 10_000, seed: 1, dt_omega_r: 2e-3, record_stride: 100, axial_drive: AxialDrive::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub beta_khz: Option<Vec<f64>>,
    pub r0_um: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WignerSection {
    pub half_width: f64,
    pub points: usize,
    /// Cycle phase in [0, 1) at which the radial state is sampled.
    pub cycle_phase: f64,
}

impl Default for WignerSection {
    fn default() -> Self {
        Self { half_width: 6.0, points: 121, cycle_phase: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OttoSection {
    /// Hot isochore length in units of 1/(kappa_a + kappa_h).
    pub hot_window_rates: f64,
    /// Cold isochore length in units of 1/kappa_a.
    pub cold_window_rates: f64,
}

impl Default for OttoSection {
    fn default() -> Self {
        Self { hot_window_rates: 3.0, cold_window_rates: 3.0 }
    }
}

/// Numerical convergence checks run alongside every scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HygieneSection {
    /// Compare against a run with (n_r + 4, n_z + 4) levels.
    pub truncation: bool,
    /// Estimate the observed RK4 order from dt, dt/2, dt/4.
    pub dt_order: bool,
    /// Length of the truncation comparison in axial periods.
    pub truncation_axial_periods: f64,
}

impl Default for HygieneSection {
    fn default() -> Self {
        Self { truncation: true, dt_order: true, truncation_axial_periods: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: ScenarioKind,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub trap: Option<TrapSection>,
    #[serde(default)]
    pub engine: EngineSection,
    #[serde(default)]
    pub fock: Option<FockDims>,
    #[serde(default = "default_models")]
    pub models: Vec<ModelKind>,
    #[serde(default)]
    pub integrator: IntegratorSection,
    #[serde(default)]
    pub ensemble: EnsembleSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub wigner: WignerSection,
    #[serde(default)]
    pub otto: OttoSection,
    #[serde(default)]
    pub hygiene: HygieneSection,
}

fn default_models() -> Vec<ModelKind> {
    ModelKind::ALL.to_vec()
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| EngineError::Config(format!("line {}, column {}: {e}", e.line(), e.column())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EngineError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Paper parameter set for a scenario.
    pub fn paper(scenario: ScenarioKind) -> Self {
        Self {
            scenario,
            output_dir: None,
            trap: Some(TrapSection { theta_deg: 45.0, r0_um: 2.0, mass_amu: 40.0 }),
            engine: EngineSection::default(),
            fock: None,
            models: default_models(),
            integrator: IntegratorSection::default(),
            ensemble: EnsembleSection::default(),
            sweep: SweepSection::default(),
            wigner: WignerSection::default(),
            otto: OttoSection::default(),
            hygiene: HygieneSection::default(),
        }
    }

    pub fn geometry(&self) -> Result<Option<TrapGeometry<f64>>> {
        let Some(t) = &self.trap else { return Ok(None) };
        TrapGeometry::new(
            t.theta_deg.to_radians(),
            t.r0_um * 1e-6,
            t.mass_amu * AMU,
            hz_to_angular(self.engine.radial_frequency_khz * 1e3),
            hz_to_angular(self.engine.axial_frequency_khz * 1e3),
        )
        .map(Some)
    }

    /// beta from `beta_khz` if given, else from the trap geometry.
    pub fn beta(&self) -> Result<f64> {
        match (self.engine.beta_khz, self.geometry()?) {
            (Some(b), _) => Ok(hz_to_angular(b * 1e3)),
            (None, Some(g)) => Ok(compute_beta(&g)),
            (None, None) => Err(EngineError::Config("engine.beta_khz or a trap section is required".into())),
        }
    }

    pub fn params(&self) -> Result<EngineParams<f64>> {
        let e = &self.engine;
        let omega_z = hz_to_angular(e.axial_frequency_khz * 1e3);
        let period = match (e.heating_period_us, e.heating_period_axial) {
            (Some(_), Some(_)) => {
                return Err(EngineError::Config(
                    "give only one of heating_period_us and heating_period_axial".into(),
                ))
            }
            (Some(us), None) => Some(us * 1e-6),
            (None, Some(n)) => Some(n * std::f64::consts::TAU / omega_z),
            (None, None) => None,
        };
        EngineParams::new(
            hz_to_angular(e.radial_frequency_khz * 1e3),
            omega_z,
            self.beta()?,
            BathRates {
                kappa_a: hz_to_angular(e.kappa_a_khz * 1e3),
                kappa_h: hz_to_angular(e.kappa_h_khz * 1e3),
                kappa_b: hz_to_angular(e.kappa_b_khz * 1e3),
            },
            Temperatures {
                t_h: e.t_hot_uk * 1e-6,
                t_a: e.t_cold_uk * 1e-6,
                t_b: e.t_axial_uk * 1e-6,
                t_0: e.t_initial_uk * 1e-6,
            },
            period,
            Some(e.heating_duty),
        )
    }

    pub fn dims(&self) -> Result<FockDims> {
        let d = self.fock.unwrap_or_default();
        FockDims::new(d.n_r, d.n_z)
    }

    pub fn propagation(&self, params: &EngineParams<f64>) -> PropagationOptions<f64> {
        let i = &self.integrator;
        PropagationOptions {
            dt_max: i.dt_omega_r / params.omega_r,
            snapshot_stride: i.snapshot_stride.max(1),
            positivity_interval: i.positivity_interval,
            ..PropagationOptions::for_params(params)
        }
    }

    pub fn windows(&self, params: &EngineParams<f64>) -> StrokeWindows<f64> {
        StrokeWindows {
            hot: self.otto.hot_window_rates / (params.kappa_a + params.kappa_h),
            cold: self.otto.cold_window_rates / params.kappa_a,
        }
    }

    pub fn engine_run(&self, params: &EngineParams<f64>, model: ModelKind) -> Result<EngineRunOptions<f64>> {
        Ok(EngineRunOptions {
            dims: self.dims()?,
            model,
            cycles: self.integrator.cycles.max(1),
            residual_threshold: self.integrator.residual_threshold,
            propagation: self.propagation(params),
            windows: Some(self.windows(params)),
        })
    }

    pub fn ensemble(&self, params: &EngineParams<f64>, t_end: f64) -> EnsembleOptions<f64> {
        let s = &self.ensemble;
        EnsembleOptions {
            trajectories: s.trajectories,
            t_end,
            dt_max: s.dt_omega_r / params.omega_r,
            seed: s.seed,
            record_stride: s.record_stride.max(1),
            drive: s.axial_drive,
            hot_bath: true,
        }
    }

    /// Static checks; never runs any dynamics.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        let params = match self.params() {
            Ok(p) => {
                report.pass("parameters", "all engine parameters in range");
                p
            }
            Err(e) => {
                let name = if e.to_string().contains("radial frequency") { "beta_below_radial" } else { "parameters" };
                report.fail(name, e.to_string());
                return report;
            }
        };
        report.pass(
            "beta_below_radial",
            format!("beta smaller than the radial frequency (beta/w_r = {:.4})", params.beta / params.omega_r),
        );
        let e = &self.engine;
        for (name, stated, omega, temp) in [
            ("nbar_hot", e.nbar_hot, params.omega_r, params.t_h),
            ("nbar_cold", e.nbar_cold, params.omega_r, params.t_a),
            ("nbar_axial", e.nbar_axial, params.omega_z, params.t_b),
        ] {
            let Some(stated) = stated else { continue };
            match planck_occupation(omega, temp) {
                Ok(n) if (n - stated).abs() <= 0.05 * stated.abs().max(1e-12) => {
                    report.pass(name, format!("Planck occupation {n:.4} matches stated {stated}"))
                }
                Ok(n) => report.fail(name, format!("Planck occupation {n:.4} differs from stated {stated} by more than 5%")),
                Err(err) => report.fail(name, err.to_string()),
            }
        }
        match self.dims() {
            Ok(dims) => {
                let (radial, axial) = truncation_estimate(&params, dims);
                let worst = radial.max(axial);
                let detail = format!("top-level thermal population estimate radial {radial:.2e}, axial {axial:.2e}");
                if worst < 1e-3 {
                    report.pass("truncation", detail);
                } else if worst < 1e-2 {
                    report.warn("truncation", detail);
                } else {
                    report.fail("truncation", detail);
                }
                let models = if self.models.is_empty() { &[ModelKind::Cm][..] } else { &self.models[..] };
                match generator_spectral_radius(&params, models, dims) {
                    Ok(rho) => {
                        let z = self.integrator.dt_omega_r / params.omega_r * rho;
                        if z < 2.5 {
                            report.pass("dt_quantum", format!("dt * spectral radius = {z:.3} < 2.5"));
                        } else {
                            report.fail("dt_quantum", format!("dt * spectral radius = {z:.3} exceeds the RK4 limit 2.5"));
                        }
                    }
                    Err(err) => report.fail("dt_quantum", err.to_string()),
                }
            }
            Err(err) => report.fail("truncation", err.to_string()),
        }
        if self.ensemble.dt_omega_r > 0.0 && self.ensemble.dt_omega_r <= 0.05 {
            report.pass("dt_classical", format!("dt * w_r = {}", self.ensemble.dt_omega_r));
        } else {
            report.fail("dt_classical", format!("dt * w_r = {} outside (0, 0.05]", self.ensemble.dt_omega_r));
        }
        if self.ensemble.trajectories < 100 {
            report.fail("trajectories", "at least 100 trajectories are required");
        }
        if self.scenario == ScenarioKind::Crossover && self.sweep.beta_khz.as_ref().is_some_and(|v| v.is_empty()) {
            report.fail("sweep", "sweep axis empty");
        }
        if self.scenario == ScenarioKind::WorkSweep && self.sweep.r0_um.as_ref().is_some_and(|v| v.is_empty()) {
            report.fail("sweep", "sweep axis empty");
        }
        if self.scenario == ScenarioKind::WorkSweep && self.trap.is_none() {
            report.fail("trap", "work-sweep needs a trap section");
        }
        if self.models.is_empty() {
            report.fail("models", "model list empty");
        }
        report
    }
}

/// Top-level populations of thermal states at the hottest occupation each
/// mode can reach: rate-weighted hot-phase radial occupation, and the larger
/// of the initial and bath occupations for the axial mode.
pub fn truncation_estimate(params: &EngineParams<f64>, dims: FockDims) -> (f64, f64) {
    let top = |nbar: f64, levels: usize| (nbar / (nbar + 1.0)).powi(levels as i32 - 1) / (nbar + 1.0);
    let radial = (params.kappa_a * params.nbar_a + params.kappa_h * params.nbar_h) / (params.kappa_a + params.kappa_h);
    let axial = planck_occupation(params.omega_z, params.t_0).unwrap_or(0.0).max(params.nbar_b);
    (top(radial, dims.n_r), top(axial, dims.n_z))
}

/// Largest spectral radius (rad/s) of the generator over `models`, with the
/// hot bath on, estimated by power iteration. This is what bounds the stable
/// RK4 step; the RK4 region contains the left half-disc of radius 2.61.
pub fn generator_spectral_radius(params: &EngineParams<f64>, models: &[ModelKind], dims: FockDims) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for &m in models {
        let h = build_hamiltonian(m, params, dims)?;
        let mut gen = LindbladGenerator::new(&h, &engine_baths(params))?;
        gen.set_time(0.0);
        worst = worst.max(gen.spectral_radius_estimate(120));
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Warn,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub status: CheckStatus,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    fn push(&mut self, name: &str, status: CheckStatus, detail: impl Into<String>) {
        self.checks.push(Check { name: name.into(), status, detail: detail.into() });
    }

    pub fn pass(&mut self, name: &str, detail: impl Into<String>) {
        self.push(name, CheckStatus::Pass, detail);
    }

    pub fn warn(&mut self, name: &str, detail: impl Into<String>) {
        self.push(name, CheckStatus::Warn, detail);
    }

    pub fn fail(&mut self, name: &str, detail: impl Into<String>) {
        self.push(name, CheckStatus::Fail, detail);
    }

    pub fn ok(&self) -> bool {
        self.checks.iter().all(|c| c.status != CheckStatus::Fail)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| c.status == CheckStatus::Fail)
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for c in &self.checks {
            let tag = match c.status {
                CheckStatus::Pass => "ok",
                CheckStatus::Warn => "warn",
                CheckStatus::Fail => "FAIL",
            };
            writeln!(f, "{tag:>4}  {:<18} {}", c.name, c.detail)?;
        }
        Ok(())
    }
}
