//! Cross-platform verification of noisy quantum devices.
//!
//! The crate simulates noisy devices exactly ([`qsim`]), samples and compiles
//! circuits ([`circuits`]), collects random-Pauli measurement data and runs the
//! random-measurement fidelity estimators ([`shadows`]), encodes circuits as
//! graphs ([`dagenc`]), and trains a two-branch measurement/circuit network
//! ([`mcnet`], on top of the small autodiff engine in [`tensornet`]) whose
//! representations predict cross-platform fidelity. [`datapipe`] ties these
//! into reproducible on-disk datasets and evaluation metrics.

pub mod circuits;
pub mod dagenc;
pub mod datapipe;
pub mod mcnet;
pub mod qsim;
pub mod shadows;
pub mod tensornet;
