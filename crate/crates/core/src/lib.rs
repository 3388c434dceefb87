// SPDX-License-Identifier: Apache-2.0

//! A simulator for a TrustZone-based confidential VM monitor: physical
//! memory and its partitioning, the monitor with its host and guest
//! interfaces, shadow memory transfers, attestation, and a model host.

pub mod attestation;
pub mod guest;
pub mod host;
pub mod layout;
pub mod machine;
pub mod mem;
pub mod platform;
pub mod shadow;
pub mod tmm;
pub mod tsi;
