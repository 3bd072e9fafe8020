//! Single-ion heat engine in a tapered trap.
//!
//! The ion's radial and axial vibrations are two nonlinearly coupled modes.
//! This crate propagates their master equation under a periodically switched
//! hot bath, reduces the radial mode to an effective Otto cycle, integrates
//! the classical Langevin counterpart and compares the dissipated power of
//! both engines.
//!
//! Numerical code is generic over [`Real`] (f32 or f64); the `*64` aliases
//! below fix the precision used by the command-line runner.

pub mod config;
pub mod error;
pub mod fock;
pub mod langevin;
pub mod lindblad;
pub mod observables;
pub mod otto;
pub mod scalar;
pub mod scenario;
pub mod snapshot;
pub mod trap;
pub mod units;
pub mod wigner;

pub use error::{EngineError, Result};
pub use scalar::{Cplx, Real};

pub type TrapGeometry64 = trap::TrapGeometry<f64>;
pub type EngineParams64 = trap::EngineParams<f64>;
pub type OperatorMatrix64 = fock::OperatorMatrix<f64>;
pub type DensityMatrix64 = fock::DensityMatrix<f64>;
pub type BathSpec64 = lindblad::BathSpec<f64>;
pub type ObservableTrace64 = observables::ObservableTrace<f64>;
pub type WignerGrid64 = wigner::WignerGrid<f64>;
pub type BogoliubovFrame64 = otto::BogoliubovFrame<f64>;
pub type CycleRecord64 = otto::CycleRecord<f64>;
pub type LangevinState64 = langevin::LangevinState<f64>;
pub type EnsembleStats64 = langevin::EnsembleStats<f64>;

pub type TrapGeometry32 = trap::TrapGeometry<f32>;
pub type EngineParams32 = trap::EngineParams<f32>;
pub type DensityMatrix32 = fock::DensityMatrix<f32>;
