// SPDX-License-Identifier: Apache-2.0

//! Conformance harness for the monitor simulator: scenario files, the
//! conformance suite, benchmarks and the command-sequence fuzzer.

pub mod bench;
pub mod cases;
pub mod checks;
pub mod driver;
pub mod fuzz;
pub mod run;
pub mod scenario;
