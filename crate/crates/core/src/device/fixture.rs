//! Inverse design: gate voltages that realise a requested operating point.
//!
//! Used to build test fixtures and to place synthetic training tiles. The
//! channel offsets are linear in the gate voltages, so a few Gauss-Seidel
//! passes over the weak neighbour coupling converge to machine precision.

use super::{DevicePhysics, Gate, GateMap, VoltageRange};
use crate::{Error, Result};

/// Operating point in physical terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegimeTarget {
    pub tb: f64,
    /// Transmission of the left and right outer barriers.
    pub outer_transmission: (f64, f64),
    /// Interdot coupling.
    pub kappa: f64,
    /// Gate-induced charge of the two dots.
    pub induced: [f64; 2],
}

impl RegimeTarget {
    pub fn double_dot(tb: f64) -> Self {
        Self {
            tb,
            outer_transmission: (0.3, 0.3),
            kappa: 0.3,
            induced: [4.0, 4.0],
        }
    }

    pub fn single_dot(tb: f64) -> Self {
        Self {
            tb,
            outer_transmission: (0.3, 0.3),
            kappa: 0.9,
            induced: [4.0, 4.0],
        }
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub struct VoltagePlanner<'a> {
    physics: &'a DevicePhysics,
}

impl<'a> VoltagePlanner<'a> {
    pub fn new(physics: &'a DevicePhysics) -> Self {
        Self { physics }
    }

    /// Solves for the lower-gate voltages that put each listed gate at the
    /// requested channel offset, starting from `start`.
    pub fn solve_offsets(&self, start: GateMap<f64>, targets: &[(Gate, f64)]) -> GateMap<f64> {
        let mut v = start;
        for _ in 0..50 {
            let mut worst: f64 = 0.0;
            for &(g, target) in targets {
                let err = target - self.physics.channel_offset(g, &v);
                v[g] += err;
                worst = worst.max(err.abs());
            }
            if worst < 1e-13 {
                break;
            }
        }
        v
    }

    /// Channel offset (volts) that yields transmission `t` on gate `g`.
    pub fn offset_for_transmission(&self, g: Gate, t: f64) -> f64 {
        self.physics.widths[g] * logit(t)
    }

    /// Plunger channel offsets that produce the requested induced charges.
    pub fn plunger_offsets(&self, induced: [f64; 2]) -> (f64, f64) {
        let p = self.physics;
        let [[a, b], [c, d]] = p.lever;
        let r0 = induced[0] - p.occupancy_offset[0];
        let r1 = induced[1] - p.occupancy_offset[1];
        let det = a * d - b * c;
        let u0 = (d * r0 - b * r1) / det;
        let u1 = (-c * r0 + a * r1) / det;
        (u0 - 2.0 * p.widths.lp, u1 - 2.0 * p.widths.rp)
    }

    /// Voltages for `target`, checked against `safety`.
    pub fn voltages_for(&self, target: &RegimeTarget, safety: &GateMap<VoltageRange>) -> Result<GateMap<f64>> {
        let p = self.physics;
        let mut start = safety.map(|_, r| r.max);
        start.tb = target.tb;
        let z_cb = p.kappa_shift + logit(target.kappa.clamp(1e-9, 1.0 - 1e-9));
        let (u_lp, u_rp) = self.plunger_offsets(target.induced);
        let targets = [
            (Gate::LB, self.offset_for_transmission(Gate::LB, target.outer_transmission.0)),
            (Gate::RB, self.offset_for_transmission(Gate::RB, target.outer_transmission.1)),
            (Gate::CB, z_cb * p.widths.cb),
            (Gate::LP, u_lp),
            (Gate::RP, u_rp),
        ];
        let v = self.solve_offsets(start, &targets);
        for g in Gate::ALL {
            if !safety[g].contains(v[g]) {
                return Err(Error::SafetyViolation {
                    gate: g,
                    voltage: v[g],
                    min: safety[g].min,
                    max: safety[g].max,
                });
            }
        }
        Ok(v)
    }

    /// Scans top-barrier settings from the lower limit upwards and returns the
    /// first one for which `target` is realisable inside `safety`.
    pub fn fixture(&self, mut target: RegimeTarget, safety: &GateMap<VoltageRange>) -> Result<GateMap<f64>> {
        let tb = safety.tb;
        let mut last = None;
        let steps = 60;
        for k in 0..=steps {
            target.tb = tb.min + tb.span() * k as f64 / steps as f64;
            match self.voltages_for(&target, safety) {
                Ok(v) => return Ok(v),
                Err(e) => last = Some(e),
            }
        }
        Err(last.unwrap_or_else(|| Error::InvalidArgument("empty top-barrier range".into())))
    }

    /// A double-dot operating point of this device.
    pub fn double_dot_fixture(&self) -> Result<GateMap<f64>> {
        self.fixture(RegimeTarget::double_dot(0.0), &self.physics.layout.safety)
    }

    /// A single-dot operating point of this device.
    pub fn single_dot_fixture(&self) -> Result<GateMap<f64>> {
        self.fixture(RegimeTarget::single_dot(0.0), &self.physics.layout.safety)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::{new_random_device, Regime};

    #[test]
    fn fixtures_hit_their_regimes() {
        for seed in 0..20 {
            let p = new_random_device(seed, None);
            let planner = VoltagePlanner::new(&p);
            let dd = planner.double_dot_fixture().unwrap();
            assert_eq!(p.oracle_regime(&dd), Regime::DoubleDot, "seed {seed}");
            let sd = planner.single_dot_fixture().unwrap();
            assert_eq!(p.oracle_regime(&sd), Regime::SingleDot, "seed {seed}");
        }
    }

    #[test]
    fn solved_offsets_are_exact() {
        let p = new_random_device(7, None);
        let planner = VoltagePlanner::new(&p);
        let v = planner.double_dot_fixture().unwrap();
        let t = p.transmission(Gate::LB, &v);
        assert!((t - 0.3).abs() < 1e-9);
        assert!((p.kappa(&v) - 0.3).abs() < 1e-9);
        let n = p.induced_charge(&v);
        assert!((n[0] - 4.0).abs() < 1e-9 && (n[1] - 4.0).abs() < 1e-9);
    }
}
