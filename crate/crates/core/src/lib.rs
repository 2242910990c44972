//! Branch elimination by instruction melding.
//!
//! This crate transforms diamond-shaped conditional regions of a small SSA
//! IR into straight-line, select-based code. The two paths of a branch are
//! aligned with a Smith-Waterman-style dynamic program over instruction
//! operations; gaps are filled with trap-free extraneous twins; aligned
//! pairs are melded into single instructions whose differing operands are
//! resolved by `select` on the branch condition; finally the conditional
//! branch disappears.
//!
//! The crate also carries everything needed to check and measure the
//! transformation: a textual format ([`text`]), a deterministic interpreter
//! used as a differential-testing oracle ([`interp`]), a naive
//! full-speculation if-conversion baseline ([`ifconv`]), static/dynamic
//! comparison metrics ([`metrics`]), a module-level fixpoint driver
//! ([`pipeline`]), and a random program generator ([`testgen`]).

pub mod align;
pub mod ifconv;
pub mod interp;
pub mod ir;
pub mod meld;
pub mod metrics;
pub mod pipeline;
pub mod region;
pub mod testgen;
pub mod text;
