//! Space-optimal synthesis of measurement-terminated unitary instruments.
//!
//! The crate computes how many simultaneously live qubits an instrument needs
//! once mid-circuit measurement, qubit reuse and delayed input loading are
//! allowed, synthesizes a circuit at that width, and checks it by simulation.
//! The focus is the entanglement-distillation instrument of a stabilizer code.

pub mod cli;
pub mod f2;
pub mod instruments;
pub mod linalg;
pub mod solver;
pub mod simulator;
pub mod stabilizer;
pub mod synthesis;

pub use f2::{F2Matrix, F2Subspace, F2Vector};
pub use instruments::{Effect, GroupingMatrix, OutcomeLabel};
pub use linalg::{CMatrix, HermitianEig, Real};

pub type Povm = instruments::Povm<f64>;
pub type Instrument = instruments::Instrument<f64>;

/// Complex scalar at double precision.
pub type C64 = num_complex::Complex<f64>;
/// Double-precision dense complex matrix.
pub type ComplexMatrix = linalg::CMatrix<f64>;
/// Single-precision dense complex matrix.
pub type ComplexMatrix32 = linalg::CMatrix<f32>;
