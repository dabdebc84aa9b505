//! Leveled fixed-point SIMD simulator.
//!
//! Slots hold arbitrary-precision scaled integers. Only encoding and rescale
//! rounding are modeled; there is no encryption and no noise.

mod cipher;
mod layout;
mod lower;
mod probe;
mod program;
mod run;

pub use cipher::{SimCiphertext, SimContext, SimPlaintext};
pub use layout::SlotLayout;
pub use lower::{compile, fold_skip_scale, Compiled, LowerConfig};
pub use probe::{perturbed_moduli, rescale_error_probe};
pub use program::{CircuitProgram, Instr, PlainSpec, Reg};
pub use run::{average, encode_input, run_circuit, ModuliMode, PlaintextStats, RunOptions, RunOutput, TraceEntry};
