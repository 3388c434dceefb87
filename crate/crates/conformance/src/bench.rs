// SPDX-License-Identifier: Apache-2.0

//! Micro-benchmarks: the cost model evaluated on simulated runs, next to
//! the reference platform's measurements.

use serde::Serialize;
use thiserror::Error;
use tmm_sim::guest::{Desc, Instr, PsciFunction};
use tmm_sim::host::virtio::{BLK_S_OK, BLK_T_IN, SECTOR_SIZE};
use tmm_sim::host::{CvmSpec, DeviceSpec, HostError, HostPolicy, HostSim, VcpuSpec};
use tmm_sim::machine::Machine;
use tmm_sim::mem::{MappingPolicy, MemError};
use tmm_sim::shadow::cost::{
    simulate_hvc_latency, HvcBreakdown, MEMCPY_REFERENCE, REFERENCE_HVC_US, REFERENCE_IO_US, REFERENCE_IPI_US,
    VANILLA_HVC_US, VANILLA_IO_US, VANILLA_IPI_US,
};
use tmm_sim::shadow::{CostError, CostModel, Counters};
use tmm_sim::tmm::{TmmOptions, TraceEvent};

pub const BENCHES: [&str; 4] = ["hvc", "ipi", "io", "memcpy"];

/// Relative tolerance for model cells against the reference table.
pub const CELL_TOLERANCE: f64 = 0.10;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("unknown benchmark {0:?}")]
    Unknown(String),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("platform: {0}")]
    Platform(#[from] MemError),
    #[error("host: {0}")]
    Host(#[from] HostError),
    #[error("benchmark run did not complete: {0}")]
    Run(String),
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.into(),
        passed,
        detail,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MemcpyCell {
    pub size: u64,
    pub policy: MappingPolicy,
    pub model_us: f64,
    pub reference_us: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "bench", rename_all = "snake_case")]
pub enum BenchReport {
    Hvc {
        breakdown: HvcBreakdown,
        simulated_us: f64,
        counters: Counters,
        reference_us: f64,
        vanilla_us: f64,
        checks: Vec<Check>,
    },
    Ipi {
        irq_round_trips: u64,
        simulated_us: f64,
        counters: Counters,
        reference_us: f64,
        vanilla_us: f64,
        checks: Vec<Check>,
    },
    Io {
        flow: String,
        hypercall_us: f64,
        vring_sync_us: f64,
        simulated_us: f64,
        counters: Counters,
        reference_us: f64,
        vanilla_us: f64,
        checks: Vec<Check>,
    },
    Memcpy {
        dynamic_overhead_us: f64,
        cells: Vec<MemcpyCell>,
        /// Model speedup of direct over dynamic at each size, in percent.
        speedup_percent: Vec<(u64, f64)>,
        reference_speedup_percent: (f64, f64),
        checks: Vec<Check>,
    },
}

impl BenchReport {
    pub fn checks(&self) -> &[Check] {
        match self {
            BenchReport::Hvc { checks, .. }
            | BenchReport::Ipi { checks, .. }
            | BenchReport::Io { checks, .. }
            | BenchReport::Memcpy { checks, .. } => checks,
        }
    }

    pub fn passed(&self) -> bool {
        self.checks().iter().all(|c| c.passed)
    }
}

pub fn run_bench(name: &str, model: &CostModel) -> Result<BenchReport, BenchError> {
    match name {
        "hvc" => hvc(model),
        "ipi" => ipi(model),
        "io" => io(model),
        "memcpy" => memcpy(model),
        other => Err(BenchError::Unknown(other.into())),
    }
}

fn machine(model: &CostModel, policy: MappingPolicy) -> Result<Machine, BenchError> {
    let cfg = crate::driver::platform(4096, 2048, policy);
    Ok(Machine::new(&cfg, TmmOptions::with_cost(model.clone()))?)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-9
}

fn hvc(model: &CostModel) -> Result<BenchReport, BenchError> {
    let k = model.constants()?;
    let breakdown = simulate_hvc_latency();
    // One guest hypercall: a single entry that exits to the host.
    let m = machine(model, MappingPolicy::Direct)?;
    let mut host = HostSim::new(m, HostPolicy::default());
    let id = host.boot_cvm(&CvmSpec::single(vec![Instr::HostCall([1, 0, 0, 0, 0, 0, 0]), Instr::Wfi]))?;
    let delta = host.run(id, 1)?.ledger;
    let simulated_us = delta.simulated_latency(&k);
    let checks = vec![
        check(
            "round trip (steps 2-8)",
            close(breakdown.round_trip_us, 148.0),
            format!("{} us", breakdown.round_trip_us),
        ),
        check("residual", close(breakdown.residual_us, 94.0), format!("{} us", breakdown.residual_us)),
        check("total", close(breakdown.total_us, 250.0), format!("{} us", breakdown.total_us)),
        check(
            "simulated hypercall",
            close(simulated_us, breakdown.total_us),
            format!("{simulated_us} us from {:?}", delta.counters()),
        ),
    ];
    Ok(BenchReport::Hvc {
        breakdown,
        simulated_us,
        counters: *delta.counters(),
        reference_us: REFERENCE_HVC_US,
        vanilla_us: VANILLA_HVC_US,
        checks,
    })
}

/// vCPU 0 wakes vCPU 1, which is busy on another cpu, then sends it an SGI.
pub fn ipi_spec() -> CvmSpec {
    let mut s = CvmSpec::single(vec![]);
    s.vcpus = vec![
        VcpuSpec {
            entry: None,
            program: vec![
                Instr::Psci {
                    function: PsciFunction::CpuOn,
                    target: 1,
                    entry: 0x10000,
                },
                Instr::SendIpi { target: 1, intid: 1 },
                Instr::Psci {
                    function: PsciFunction::CpuOff,
                    target: 0,
                    entry: 0,
                },
            ],
        },
        VcpuSpec {
            entry: None,
            program: vec![Instr::Compute(5_000), Instr::Halt],
        },
    ];
    s
}

fn ipi(model: &CostModel) -> Result<BenchReport, BenchError> {
    let k = model.constants()?;
    let m = machine(model, MappingPolicy::Direct)?;
    let mut host = HostSim::new(m, HostPolicy::default());
    let id = host.boot_cvm(&ipi_spec())?;
    let r = host.run(id, 100)?;
    if !r.halted {
        return Err(BenchError::Run("ipi guest did not finish".into()));
    }
    // Each interrupt round trip is one guest exit plus the entry that
    // resumes it.
    let per_trip = k.world_switch_us + k.tec_context_copy_us + k.guest_trap_us + k.exit_residual_us;
    let simulated_us = r.irq_round_trips as f64 * per_trip;
    let checks = vec![
        check(
            "interrupt round trips",
            r.irq_round_trips == 2,
            format!("{} round trips", r.irq_round_trips),
        ),
        check(
            "vIRQ delivered",
            r.traces.get(&1).and_then(|t| t.first()) == Some(&TraceEvent::Virq(1)),
            format!("{:?}", r.traces.get(&1)),
        ),
    ];
    Ok(BenchReport::Ipi {
        irq_round_trips: r.irq_round_trips,
        simulated_us,
        counters: *r.ledger.counters(),
        reference_us: REFERENCE_IPI_US,
        vanilla_us: VANILLA_IPI_US,
        checks,
    })
}

const IO: u64 = 0x100000;
const HDR: u64 = IO + 6 * 0x1000;
const STATUS: u64 = HDR + 0x100;
const DATA: u64 = IO + 7 * 0x1000;

/// One block read through a virtqueue: the doorbell exit, the device's
/// completion interrupt, and the vring copies in both directions.
pub fn io_spec() -> CvmSpec {
    let mut header = BLK_T_IN.to_le_bytes().to_vec();
    header.extend([0; 12]);
    let mut s = CvmSpec::single(vec![
        Instr::MemWrite { ipa: HDR, bytes: header },
        Instr::VirtioSubmit {
            queue: 0,
            descs: vec![
                Desc {
                    ipa: HDR,
                    len: 16,
                    writable: false,
                },
                Desc {
                    ipa: DATA,
                    len: SECTOR_SIZE as u32,
                    writable: true,
                },
                Desc {
                    ipa: STATUS,
                    len: 1,
                    writable: true,
                },
            ],
        },
        Instr::Compute(50),
        Instr::MemRead { ipa: STATUS, len: 1 },
        Instr::Halt,
    ]);
    s.params.io_window_base = IO;
    s.params.io_window_pages = 8;
    s.params.io_queues = 1;
    s.devices = vec![DeviceSpec::Blk {
        queue: 0,
        sectors: 8,
        path: None,
        intid: None,
    }];
    s
}

fn io(model: &CostModel) -> Result<BenchReport, BenchError> {
    let k = model.constants()?;
    let m = machine(model, MappingPolicy::Direct)?;
    let mut host = HostSim::new(m, HostPolicy::default());
    let id = host.boot_cvm(&io_spec())?;
    let r = host.run(id, 100)?;
    if !r.halted {
        return Err(BenchError::Run("io guest did not finish".into()));
    }
    let c = *r.ledger.counters();
    let simulated_us = r.ledger.simulated_latency(&k);
    let vring_sync_us = r.ledger.copy_us();
    let checks = vec![
        check(
            "request completed",
            r.traces[&0].last() == Some(&TraceEvent::Read { ipa: STATUS, bytes: vec![BLK_S_OK] }),
            format!("{:?}", r.traces[&0]),
        ),
        check(
            "no remapping under the direct policy",
            c.stage2_map == 0 && c.stage2_unmap == 0 && c.tlb_flush == 0,
            format!("{c:?}"),
        ),
    ];
    Ok(BenchReport::Io {
        flow: "virtio-blk sector read".into(),
        hypercall_us: simulated_us - vring_sync_us,
        vring_sync_us,
        simulated_us,
        counters: c,
        reference_us: REFERENCE_IO_US,
        vanilla_us: VANILLA_IO_US,
        checks,
    })
}

fn memcpy(model: &CostModel) -> Result<BenchReport, BenchError> {
    let cal = model.calibration()?;
    let mut cells = Vec::new();
    let mut speedup_percent = Vec::new();
    for (size, direct, dynamic) in MEMCPY_REFERENCE {
        let d = model.simulate_memcpy_latency(size, MappingPolicy::Direct)?;
        let y = model.simulate_memcpy_latency(size, MappingPolicy::Dynamic)?;
        for (policy, model_us, reference_us) in [(MappingPolicy::Direct, d, direct), (MappingPolicy::Dynamic, y, dynamic)] {
            cells.push(MemcpyCell {
                size,
                policy,
                model_us,
                reference_us,
                relative_error: ((model_us - reference_us) / reference_us).abs(),
            });
        }
        speedup_percent.push((size, (y / d - 1.0) * 100.0));
    }
    let ref_lo = MEMCPY_REFERENCE.iter().map(|r| (r.2 / r.1 - 1.0) * 100.0).fold(f64::MAX, f64::min);
    let ref_hi = MEMCPY_REFERENCE.iter().map(|r| (r.2 / r.1 - 1.0) * 100.0).fold(f64::MIN, f64::max);
    let lo = speedup_percent.iter().map(|s| s.1).fold(f64::MAX, f64::min);
    let hi = speedup_percent.iter().map(|s| s.1).fold(f64::MIN, f64::max);
    let worst = cells.iter().map(|c| c.relative_error).fold(0.0, f64::max);
    let (claim_lo, claim_hi) = (12.0, 178.0);
    let checks = vec![
        check(
            "fitted overhead",
            (1.5..=1.6).contains(&cal.dynamic_overhead_us),
            format!("{:.3} us", cal.dynamic_overhead_us),
        ),
        check(
            "all cells within tolerance",
            worst <= CELL_TOLERANCE,
            format!("worst relative error {:.1}%", worst * 100.0),
        ),
        check(
            "speedups within the reference range",
            speedup_percent.iter().all(|s| s.1.round() >= claim_lo && s.1.round() <= claim_hi),
            format!("model {lo:.1}%..{hi:.1}%, reference {claim_lo}%..{claim_hi}%"),
        ),
        check(
            "range endpoints reproduced",
            ((lo - ref_lo) / ref_lo).abs() <= CELL_TOLERANCE && ((hi - ref_hi) / ref_hi).abs() <= CELL_TOLERANCE,
            format!("model {lo:.1}%..{hi:.1}%, table {ref_lo:.1}%..{ref_hi:.1}%"),
        ),
        check(
            "dynamic never cheaper",
            [64u64, 128, 1024, 2048, 4096, 8192].iter().all(|&s| {
                model.simulate_memcpy_latency(s, MappingPolicy::Dynamic).unwrap()
                    >= model.simulate_memcpy_latency(s, MappingPolicy::Direct).unwrap()
            }),
            String::new(),
        ),
    ];
    Ok(BenchReport::Memcpy {
        dynamic_overhead_us: cal.dynamic_overhead_us,
        cells,
        speedup_percent,
        reference_speedup_percent: (ref_lo, ref_hi),
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_benches_pass_on_reference_model() {
        let model = CostModel::reference();
        for b in BENCHES {
            let r = run_bench(b, &model).unwrap();
            assert!(r.passed(), "{b}: {:?}", r.checks());
        }
    }

    #[test]
    fn uncalibrated_model_is_refused() {
        let model = CostModel::uncalibrated();
        assert!(matches!(run_bench("memcpy", &model), Err(BenchError::Cost(CostError::Uncalibrated))));
        assert!(matches!(run_bench("nope", &model), Err(BenchError::Unknown(_))));
    }
}
