// SPDX-License-Identifier: Apache-2.0

//! Latency model: a calibrated copy-cost curve plus per-event constants.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mem::MappingPolicy;

/// Measured memcpy latency (bytes, direct µs, dynamic µs) from the
/// reference platform.
pub const MEMCPY_REFERENCE: [(u64, f64, f64); 4] = [
    (64, 0.9, 2.5),
    (256, 1.6, 3.1),
    (512, 3.2, 4.7),
    (4096, 12.9, 14.5),
];

/// Vanilla KVM reference latencies (µs), kept for comparison columns.
pub const VANILLA_HVC_US: f64 = 35.0;
pub const VANILLA_IPI_US: f64 = 122.0;
pub const VANILLA_IO_US: f64 = 1118.0;
/// Measured latencies of the same operations on the reference monitor.
pub const REFERENCE_HVC_US: f64 = 250.0;
pub const REFERENCE_IPI_US: f64 = 314.0;
pub const REFERENCE_IO_US: f64 = 2612.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CostError {
    #[error("cost model has not been calibrated")]
    Uncalibrated,
    #[error("calibration needs samples at two or more distinct sizes")]
    DegenerateFit,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    pub size: u64,
    pub direct_us: f64,
    pub dynamic_us: f64,
}

impl From<(u64, f64, f64)> for CalibrationSample {
    fn from((size, direct_us, dynamic_us): (u64, f64, f64)) -> Self {
        CalibrationSample {
            size,
            direct_us,
            dynamic_us,
        }
    }
}

pub fn reference_samples() -> Vec<CalibrationSample> {
    MEMCPY_REFERENCE.iter().copied().map(Into::into).collect()
}

/// Copy cost as a piecewise-linear curve through calibrated knots, extended
/// past either end along the outermost segment and clamped at zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CopyCurve {
    knots: Vec<(f64, f64)>,
}

impl CopyCurve {
    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    pub fn eval(&self, size: u64) -> f64 {
        let x = size as f64;
        let k = &self.knots;
        let seg = match k.iter().position(|&(kx, _)| kx >= x) {
            Some(0) => 0,
            Some(i) => i - 1,
            None => k.len() - 2,
        };
        let (x0, y0) = k[seg];
        let (x1, y1) = k[seg + 1];
        let y = y0 + (y1 - y0) * (x - x0) / (x1 - x0);
        y.max(0.0)
    }
}

/// Ordinary least-squares line, kept as a diagnostic next to the curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub intercept_us: f64,
    pub slope_us_per_byte: f64,
}

impl LinearFit {
    pub fn eval(&self, size: u64) -> f64 {
        self.intercept_us + self.slope_us_per_byte * size as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub copy: CopyCurve,
    /// Least-squares constant separating the dynamic column from the curve.
    pub dynamic_overhead_us: f64,
    pub linear: LinearFit,
}

/// Fits the copy curve and the dynamic-mapping overhead to `samples`.
///
/// Samples at the same size are averaged into one knot. The overhead is
/// the least-squares constant offset between the dynamic measurements and
/// the fitted curve, which for exact knots is the mean difference.
pub fn calibrate(samples: &[CalibrationSample]) -> Result<Calibration, CostError> {
    if samples
        .iter()
        .any(|s| !s.direct_us.is_finite() || !s.dynamic_us.is_finite())
    {
        return Err(CostError::DegenerateFit);
    }
    let mut sizes: Vec<u64> = samples.iter().map(|s| s.size).collect();
    sizes.sort_unstable();
    sizes.dedup();
    if sizes.len() < 2 {
        return Err(CostError::DegenerateFit);
    }
    let knots = sizes
        .iter()
        .map(|&size| {
            let at: Vec<f64> = samples
                .iter()
                .filter(|s| s.size == size)
                .map(|s| s.direct_us)
                .collect();
            (size as f64, at.iter().sum::<f64>() / at.len() as f64)
        })
        .collect();
    let copy = CopyCurve { knots };
    let n = samples.len() as f64;
    let dynamic_overhead_us = samples
        .iter()
        .map(|s| s.dynamic_us - copy.eval(s.size))
        .sum::<f64>()
        / n;

    let mean_x = samples.iter().map(|s| s.size as f64).sum::<f64>() / n;
    let mean_y = samples.iter().map(|s| s.direct_us).sum::<f64>() / n;
    let sxx: f64 = samples.iter().map(|s| (s.size as f64 - mean_x).powi(2)).sum();
    let sxy: f64 = samples
        .iter()
        .map(|s| (s.size as f64 - mean_x) * (s.direct_us - mean_y))
        .sum();
    let slope = sxy / sxx;
    let linear = LinearFit {
        intercept_us: mean_y - slope * mean_x,
        slope_us_per_byte: slope,
    };
    Ok(Calibration {
        copy,
        dynamic_overhead_us,
        linear,
    })
}

/// One step of a hypercall round trip.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Step {
    pub name: &'static str,
    pub us: f64,
}

pub const HVC_STEPS: [Step; 9] = [
    Step { name: "trap from guest to monitor", us: 4.0 },
    Step { name: "monitor to firmware for world switch", us: 27.0 },
    Step { name: "save guest context, restore normal context", us: 30.0 },
    Step { name: "return to host hypervisor", us: 4.0 },
    Step { name: "host issues monitor call, trap to firmware", us: 23.0 },
    Step { name: "save normal context, restore guest context", us: 30.0 },
    Step { name: "return to monitor", us: 4.0 },
    Step { name: "copy execution-context registers", us: 30.0 },
    Step { name: "return to guest", us: 4.0 },
];

/// Timer-state and error-checking work on every exit, not broken down further.
pub const HVC_RESIDUAL_US: f64 = 94.0;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HvcBreakdown {
    pub steps: Vec<Step>,
    pub residual_us: f64,
    /// Steps 2 through 8: the monitor/host round trip proper.
    pub round_trip_us: f64,
    pub total_us: f64,
}

pub fn simulate_hvc_latency() -> HvcBreakdown {
    let steps = HVC_STEPS.to_vec();
    let round_trip_us = steps[1..8].iter().map(|s| s.us).sum();
    let total_us = steps.iter().map(|s| s.us).sum::<f64>() + HVC_RESIDUAL_US;
    HvcBreakdown {
        steps,
        residual_us: HVC_RESIDUAL_US,
        round_trip_us,
        total_us,
    }
}

/// Per-event latencies used by [`super::CostLedger::simulated_latency`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyConstants {
    /// A monitor call round trip through the firmware (no guest involved).
    pub world_switch_us: f64,
    /// Extra register copy when the round trip carries an execution context.
    pub tec_context_copy_us: f64,
    /// Guest to monitor trap plus the return to the guest.
    pub guest_trap_us: f64,
    pub exit_residual_us: f64,
    pub tlb_flush_us: f64,
    pub stage2_map_us: f64,
    pub stage2_unmap_us: f64,
}

impl LatencyConstants {
    /// Event constants from the hypercall breakdown and the calibrated
    /// dynamic overhead. The fit cannot tell map, unmap and flush apart, so
    /// the overhead is split evenly between them.
    pub fn from_calibration(cal: &Calibration) -> Self {
        let s = &HVC_STEPS;
        let share = cal.dynamic_overhead_us / 3.0;
        LatencyConstants {
            world_switch_us: s[1..7].iter().map(|s| s.us).sum(),
            tec_context_copy_us: s[7].us,
            guest_trap_us: s[0].us + s[8].us,
            exit_residual_us: HVC_RESIDUAL_US,
            tlb_flush_us: share,
            stage2_map_us: share,
            stage2_unmap_us: share,
        }
    }
}

/// Calibration plus derived constants.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    calibration: Option<Calibration>,
}

impl CostModel {
    pub fn uncalibrated() -> Self {
        CostModel { calibration: None }
    }

    pub fn calibrated(samples: &[CalibrationSample]) -> Result<Self, CostError> {
        Ok(CostModel {
            calibration: Some(calibrate(samples)?),
        })
    }

    pub fn reference() -> Self {
        Self::calibrated(&reference_samples()).expect("reference table is well formed")
    }

    pub fn calibration(&self) -> Result<&Calibration, CostError> {
        self.calibration.as_ref().ok_or(CostError::Uncalibrated)
    }

    pub fn constants(&self) -> Result<LatencyConstants, CostError> {
        Ok(LatencyConstants::from_calibration(self.calibration()?))
    }

    pub fn copy_cost(&self, size: u64) -> Result<f64, CostError> {
        Ok(self.calibration()?.copy.eval(size))
    }

    pub fn simulate_memcpy_latency(
        &self,
        size: u64,
        policy: MappingPolicy,
    ) -> Result<f64, CostError> {
        let cal = self.calibration()?;
        let direct = cal.copy.eval(size);
        Ok(match policy {
            MappingPolicy::Direct => direct,
            MappingPolicy::Dynamic => direct + cal.dynamic_overhead_us,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn overhead_from_reference_table() {
        // Differences per row: 1.6, 1.5, 1.5, 1.6 -> mean 1.55.
        let cal = calibrate(&reference_samples()).unwrap();
        assert!((cal.dynamic_overhead_us - 1.55).abs() < 1e-9);
        assert!((1.5..=1.6).contains(&cal.dynamic_overhead_us));
    }

    #[test]
    fn reproduces_all_cells() {
        let model = CostModel::reference();
        for (size, direct, dynamic) in MEMCPY_REFERENCE {
            let d = model.simulate_memcpy_latency(size, MappingPolicy::Direct).unwrap();
            let y = model.simulate_memcpy_latency(size, MappingPolicy::Dynamic).unwrap();
            assert!(rel(d, direct) <= 0.10, "{size}: {d} vs {direct}");
            assert!(rel(y, dynamic) <= 0.10, "{size}: {y} vs {dynamic}");
        }
        let d64 = model.simulate_memcpy_latency(64, MappingPolicy::Direct).unwrap();
        let y64 = model.simulate_memcpy_latency(64, MappingPolicy::Dynamic).unwrap();
        assert!(rel(y64 / d64, 2.5 / 0.9) <= 0.10);
    }

    #[test]
    fn straight_line_cannot_fit_direct_column() {
        // The OLS line misses the 64 B cell by ~40%; this is why the copy
        // cost is a piecewise curve.
        let cal = calibrate(&reference_samples()).unwrap();
        assert!(rel(cal.linear.eval(64), 0.9) > 0.10);
    }

    #[test]
    fn identical_columns_give_zero_overhead() {
        let samples: Vec<_> = MEMCPY_REFERENCE
            .iter()
            .map(|&(s, d, _)| CalibrationSample::from((s, d, d)))
            .collect();
        assert!(calibrate(&samples).unwrap().dynamic_overhead_us.abs() < 1e-12);
    }

    #[test]
    fn single_sample_is_degenerate() {
        assert_eq!(
            calibrate(&[CalibrationSample::from((64, 0.9, 2.5))]),
            Err(CostError::DegenerateFit)
        );
        let same_size = [(64, 0.9, 2.5).into(), (64, 1.0, 2.6).into()];
        assert_eq!(calibrate(&same_size), Err(CostError::DegenerateFit));
    }

    #[test]
    fn uncalibrated_errors() {
        let m = CostModel::uncalibrated();
        assert_eq!(
            m.simulate_memcpy_latency(64, MappingPolicy::Direct),
            Err(CostError::Uncalibrated)
        );
    }

    #[test]
    fn curve_extrapolates_and_clamps() {
        let model = CostModel::reference();
        let expect = 0.9 - 64.0 * (0.7 / 192.0);
        assert!((model.copy_cost(0).unwrap() - expect).abs() < 1e-12);
        assert!(model.copy_cost(8192).unwrap() > 12.9);
        let c = CopyCurve {
            knots: vec![(100.0, 1.0), (200.0, 5.0)],
        };
        assert_eq!(c.eval(0), 0.0);
    }

    #[test]
    fn hvc_breakdown() {
        let b = simulate_hvc_latency();
        assert_eq!(b.round_trip_us, 148.0);
        assert_eq!(b.total_us, 250.0);
        let k = LatencyConstants::from_calibration(&calibrate(&reference_samples()).unwrap());
        assert_eq!(
            k.world_switch_us + k.tec_context_copy_us + k.guest_trap_us + k.exit_residual_us,
            250.0
        );
    }
}
