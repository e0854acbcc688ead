//! Genetic optimization of field trajectories accelerated by a
//! deep-kernel-learning surrogate, with a ferroelectric lattice model as the
//! expensive objective.

pub mod ferrosim;
pub mod waveform;
pub mod genetic;
pub mod acquisition;
pub mod dkl;
pub mod orchestrator;
pub mod rng;
