// SPDX-License-Identifier: Apache-2.0

//! A platform plus its monitor behind one lock. All host commands pass
//! through [`Machine::tmi`], which serializes them and can record a trace
//! for later replay.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mem::MemError;
use crate::platform::{HostAction, Platform, PlatformConfig};
use crate::tmm::{TmiCommand, TmiRequest, TmiResponse, TmiStatus, Tmm, TmmOptions};

/// One command as seen at the host/monitor boundary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub seq: u64,
    pub cpu: usize,
    pub command: String,
    pub id: u64,
    pub args: [u64; 7],
    pub status: TmiStatus,
    pub results: [u64; 4],
    /// Host-side platform mutations made since the previous command.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub host_actions: Vec<HostAction>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReplayError {
    #[error("platform: {0}")]
    Platform(#[from] MemError),
    #[error("record {seq}: expected {expected:?}/{expected_results:?}, got {got:?}/{got_results:?}")]
    Diverged {
        seq: u64,
        expected: TmiStatus,
        expected_results: [u64; 4],
        got: TmiStatus,
        got_results: [u64; 4],
    },
}

#[derive(Clone)]
struct Inner {
    plat: Platform,
    tmm: Tmm,
    trace: Option<Vec<TraceRecord>>,
    seq: u64,
}

#[derive(Clone)]
pub struct Machine {
    inner: Arc<Mutex<Inner>>,
}

impl std::fmt::Debug for Machine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Machine").finish_non_exhaustive()
    }
}

impl Machine {
    pub fn new(cfg: &PlatformConfig, options: TmmOptions) -> Result<Machine, MemError> {
        let plat = Platform::new(cfg)?;
        let tmm = Tmm::boot(cfg, options);
        Ok(Machine {
            inner: Arc::new(Mutex::new(Inner {
                plat,
                tmm,
                trace: None,
                seq: 0,
            })),
        })
    }

    /// An independent copy of the whole machine, trace included.
    pub fn fork(&self) -> Machine {
        Machine {
            inner: Arc::new(Mutex::new(self.lock().clone())),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        // A panic while holding the lock leaves a consistent machine: every
        // command either completed or never started mutating.
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn tmi(&self, cpu: usize, req: &TmiRequest) -> TmiResponse {
        let mut g = self.lock();
        let inner = &mut *g;
        let host_actions = inner.plat.take_journal();
        let resp = inner.tmm.dispatch(&mut inner.plat, cpu, req);
        let seq = inner.seq;
        inner.seq += 1;
        if let Some(trace) = inner.trace.as_mut() {
            trace.push(TraceRecord {
                seq,
                cpu,
                command: TmiCommand::from_id(req.command).map_or("unknown", TmiCommand::name).to_string(),
                id: req.command,
                args: req.args,
                status: resp.status,
                results: resp.results,
                host_actions,
            });
        }
        resp
    }

    pub fn call(&self, cpu: usize, cmd: TmiCommand, args: &[u64]) -> TmiResponse {
        self.tmi(cpu, &TmiRequest::new(cmd, args))
    }

    /// Runs `f` with exclusive access to the platform and the monitor.
    /// Host code must only use the platform's `host_*` methods.
    pub fn with<R>(&self, f: impl FnOnce(&mut Platform, &mut Tmm) -> R) -> R {
        let mut g = self.lock();
        let inner = &mut *g;
        f(&mut inner.plat, &mut inner.tmm)
    }

    pub fn enable_trace(&self) {
        self.lock().trace.get_or_insert_with(Vec::new);
    }

    pub fn take_trace(&self) -> Vec<TraceRecord> {
        self.lock().trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Digest of the architectural state: memory, interrupt controller,
    /// clock and monitor objects. Counters and logs are excluded.
    pub fn fingerprint(&self) -> u64 {
        let g = self.lock();
        let mut h = DefaultHasher::new();
        g.plat.fingerprint(&mut h);
        g.tmm.fingerprint(&mut h);
        h.finish()
    }

    /// Feeds a recorded trace through a fresh machine and checks that every
    /// response matches.
    pub fn replay(cfg: &PlatformConfig, options: TmmOptions, records: &[TraceRecord]) -> Result<Machine, ReplayError> {
        let m = Machine::new(cfg, options)?;
        for r in records {
            m.with(|plat, _| {
                for a in &r.host_actions {
                    plat.apply(a);
                }
            });
            m.with(|plat, _| plat.take_journal());
            let resp = m.tmi(r.cpu, &TmiRequest { command: r.id, args: r.args });
            if resp.status != r.status || resp.results != r.results {
                return Err(ReplayError::Diverged {
                    seq: r.seq,
                    expected: r.status,
                    expected_results: r.results,
                    got: resp.status,
                    got_results: resp.results,
                });
            }
        }
        Ok(m)
    }
}
