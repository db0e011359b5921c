//! Simulation and optimization engine for pulsed control of a coupled
//! electron-nuclear spin register.
//!
//! The crate models a two-spin (optionally three-spin) system driven by a
//! two-channel piecewise-constant microwave pulse, a virtual spectrometer
//! that distorts the programmed waveform through a hardware transfer
//! function and reads out noisy transition signals, and three gradient
//! strategies for improving a pulse against that spectrometer:
//!
//! * open-loop gradient ascent from an analytic model gradient,
//! * a closed-loop scheme that estimates gradients by inserting +/- pi/2
//!   rotations into the executed pulse,
//! * a closed-loop finite-difference scheme over a configurable basis
//!   (per-segment, Hadamard-block, or Slepian).
//!
//! Units: all user-facing frequencies and amplitudes are in MHz, times in
//! ns; Hamiltonians carry angular units (rad/us) internally, with the 2*pi
//! applied exactly once at Hamiltonian construction.
//!
//! Everything is deterministic under a fixed master seed: measurement noise
//! is drawn from per-component child streams, so parallel and sequential
//! executions of the same run produce bit-identical results.

pub mod campaign;
pub mod error;
pub mod exec;
pub mod linalg;
pub mod optimizers;
pub mod propagator;
pub mod pulse_lib;
pub mod seeds;
pub mod spin_model;
pub mod virtual_spectrometer;

pub use error::{Error, Result};
