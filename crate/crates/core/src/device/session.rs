use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use super::physics::check_safety;
use super::{DevicePhysics, Gate, GateMap, Regime, VoltageRange};
use crate::{Error, Result};

/// Mutable state of one measurement session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceState {
    pub voltages: GateMap<f64>,
    /// Current safety ranges; these start at the layout ranges and may be
    /// shifted during characterization.
    pub safety: GateMap<VoltageRange>,
    /// Last measured saturation current.
    pub a_max: Option<f64>,
}

/// A 1D sweep as measured, in sweep order and unnormalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSweep {
    pub gate: Gate,
    pub setpoints: Vec<f64>,
    pub currents: Vec<f64>,
}

/// A 2D sweep as measured. `current[iy * x.len() + ix]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawMap {
    pub x_gate: Gate,
    pub y_gate: Gate,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub current: Vec<f64>,
}

/// A single-threaded session on one simulated device.
///
/// Every voltage the session applies is checked against the current safety
/// ranges; nothing is clamped silently.
#[derive(Debug, Clone)]
pub struct Device {
    physics: Arc<DevicePhysics>,
    state: DeviceState,
    rng: ChaCha8Rng,
    noiseless: bool,
    drift: f64,
    n_1d: usize,
    n_2d: usize,
    n_measurements: usize,
}

impl Device {
    /// Opens a session with every gate at its upper safety limit. Measurement
    /// noise is drawn from a stream seeded by `session_seed`.
    pub fn new(physics: impl Into<Arc<DevicePhysics>>, session_seed: u64) -> Self {
        let physics = physics.into();
        let safety = physics.layout.safety;
        Self {
            state: DeviceState {
                voltages: safety.map(|_, r| r.max),
                safety,
                a_max: None,
            },
            physics,
            rng: ChaCha8Rng::seed_from_u64(session_seed),
            noiseless: false,
            drift: 0.0,
            n_1d: 0,
            n_2d: 0,
            n_measurements: 0,
        }
    }

    pub fn noiseless(mut self) -> Self {
        self.noiseless = true;
        self
    }

    pub fn set_noiseless(&mut self, on: bool) {
        self.noiseless = on;
    }

    pub fn physics(&self) -> &DevicePhysics {
        &self.physics
    }

    pub fn shared_physics(&self) -> Arc<DevicePhysics> {
        Arc::clone(&self.physics)
    }

    pub fn state(&self) -> &DeviceState {
        &self.state
    }

    pub fn voltages(&self) -> GateMap<f64> {
        self.state.voltages
    }

    pub fn voltage(&self, g: Gate) -> f64 {
        self.state.voltages[g]
    }

    pub fn safety(&self) -> &GateMap<VoltageRange> {
        &self.state.safety
    }

    pub fn noise_floor(&self) -> f64 {
        self.physics.layout.noise_floor
    }

    pub fn a_max(&self) -> Option<f64> {
        self.state.a_max
    }

    pub fn n_1d(&self) -> usize {
        self.n_1d
    }

    pub fn n_2d(&self) -> usize {
        self.n_2d
    }

    pub fn n_measurements(&self) -> usize {
        self.n_measurements
    }

    pub fn set_voltage(&mut self, g: Gate, v: f64) -> Result<()> {
        let r = self.state.safety[g];
        if !v.is_finite() || !r.contains(v) {
            return Err(Error::SafetyViolation {
                gate: g,
                voltage: v,
                min: r.min,
                max: r.max,
            });
        }
        self.state.voltages[g] = v;
        Ok(())
    }

    pub fn set_voltages(&mut self, v: &GateMap<f64>) -> Result<()> {
        check_safety(v, &self.state.safety)?;
        self.state.voltages = *v;
        Ok(())
    }

    /// Moves every gate to its current upper safety limit.
    pub fn set_all_to_max(&mut self) {
        self.state.voltages = self.state.safety.map(|_, r| r.max);
    }

    /// Shifts every safety range by `delta` volts. Gates left outside their
    /// new range are moved to the nearest legal value.
    pub fn shift_safety(&mut self, delta: f64) {
        self.state.safety = self.state.safety.map(|_, r| r.shifted(delta));
        let safety = self.state.safety;
        self.state.voltages = self.state.voltages.map(|g, v| safety[g].clamp(*v));
    }

    fn read(&mut self, v: &GateMap<f64>) -> Result<f64> {
        self.n_measurements += 1;
        if self.noiseless {
            return self
                .physics
                .conductance::<ChaCha8Rng>(v, &self.state.safety, None);
        }
        let mut i = self
            .physics
            .conductance(v, &self.state.safety, Some(&mut self.rng))?;
        if self.physics.drift_sigma > 0.0 {
            let step = Normal::new(0.0, self.physics.drift_sigma).expect("finite sigma");
            self.drift += step.sample(&mut self.rng);
            i = (i + self.drift).max(0.0);
        }
        Ok(i)
    }

    /// Current at the present voltages.
    pub fn measure(&mut self) -> Result<f64> {
        let v = self.state.voltages;
        self.read(&v)
    }

    /// Saturation current with every gate at 0 V.
    pub fn measure_a_max_all_zero(&mut self) -> Result<f64> {
        let zero = GateMap::splat(0.0);
        self.set_voltages(&zero)?;
        let a = self.measure()?;
        self.state.a_max = Some(a);
        Ok(a)
    }

    /// Saturation current with every gate at its upper safety limit.
    pub fn measure_a_max_safe_max(&mut self) -> Result<f64> {
        self.set_all_to_max();
        let a = self.measure()?;
        self.state.a_max = Some(a);
        Ok(a)
    }

    pub fn record_a_max(&mut self, a: f64) {
        self.state.a_max = Some(a);
    }

    pub fn clear_a_max(&mut self) {
        self.state.a_max = None;
    }

    fn linspace(from: f64, to: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| {
                if i + 1 == n {
                    to
                } else {
                    from + (to - from) * i as f64 / (n - 1) as f64
                }
            })
            .collect()
    }

    /// Steps `gate` from `v_from` to `v_to` over `n_points` setpoints with all
    /// other gates fixed. Voltages are restored afterwards.
    pub fn sweep_1d(&mut self, gate: Gate, v_from: f64, v_to: f64, n_points: usize) -> Result<RawSweep> {
        if n_points < 2 {
            return Err(Error::InvalidArgument(format!(
                "a sweep needs at least 2 points, got {n_points}"
            )));
        }
        let r = self.state.safety[gate];
        for v in [v_from, v_to] {
            if !r.contains(v) {
                return Err(Error::SafetyViolation {
                    gate,
                    voltage: v,
                    min: r.min,
                    max: r.max,
                });
            }
        }
        let saved = self.state.voltages;
        let setpoints = Self::linspace(v_from, v_to, n_points);
        let mut currents = Vec::with_capacity(n_points);
        let mut v = saved;
        for &s in &setpoints {
            v[gate] = s;
            currents.push(self.read(&v)?);
        }
        self.state.voltages = saved;
        self.n_1d += 1;
        Ok(RawSweep {
            gate,
            setpoints,
            currents,
        })
    }

    /// Steps `gate_y` over `range_y` in the outer loop and `gate_x` over
    /// `range_x` in the inner loop. Voltages are restored afterwards.
    pub fn sweep_2d(
        &mut self,
        gate_x: Gate,
        gate_y: Gate,
        range_x: (f64, f64),
        range_y: (f64, f64),
        n_x: usize,
        n_y: usize,
    ) -> Result<RawMap> {
        if n_x < 2 || n_y < 2 {
            return Err(Error::InvalidArgument(format!(
                "a 2D sweep needs at least 2 points per axis, got {n_x}x{n_y}"
            )));
        }
        if gate_x == gate_y {
            return Err(Error::InvalidArgument("2D sweep over a single gate".into()));
        }
        for (g, (a, b)) in [(gate_x, range_x), (gate_y, range_y)] {
            let r = self.state.safety[g];
            for v in [a, b] {
                if !r.contains(v) {
                    return Err(Error::SafetyViolation {
                        gate: g,
                        voltage: v,
                        min: r.min,
                        max: r.max,
                    });
                }
            }
        }
        let saved = self.state.voltages;
        let x = Self::linspace(range_x.0, range_x.1, n_x);
        let y = Self::linspace(range_y.0, range_y.1, n_y);
        let mut current = Vec::with_capacity(n_x * n_y);
        let mut v = saved;
        for &vy in &y {
            v[gate_y] = vy;
            for &vx in &x {
                v[gate_x] = vx;
                current.push(self.read(&v)?);
            }
        }
        self.state.voltages = saved;
        self.n_2d += 1;
        Ok(RawMap {
            x_gate: gate_x,
            y_gate: gate_y,
            x,
            y,
            current,
        })
    }

    /// Ground-truth regime at the present voltages.
    pub fn oracle_regime(&self) -> Regime {
        self.physics.oracle_regime(&self.state.voltages)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::{new_random_device, FaultFlags};

    #[test]
    fn sweep_restores_voltages_and_counts() {
        let mut d = Device::new(new_random_device(1, None), 0);
        d.set_voltage(Gate::TB, -3.0).unwrap();
        let before = d.voltages();
        let s = d.sweep_1d(Gate::LB, 0.0, -2.0, 2).unwrap();
        assert_eq!(s.setpoints, vec![0.0, -2.0]);
        assert_eq!(d.voltages(), before);
        assert_eq!(d.n_1d(), 1);
        let m = d
            .sweep_2d(Gate::LP, Gate::RP, (-1.0, -0.9), (-1.0, -0.9), 5, 4)
            .unwrap();
        assert_eq!(m.current.len(), 20);
        assert_eq!(d.voltages(), before);
        assert_eq!(d.n_2d(), 1);
    }

    #[test]
    fn degenerate_2d_request_is_rejected() {
        let mut d = Device::new(new_random_device(1, None), 0);
        assert!(d
            .sweep_2d(Gate::LP, Gate::RP, (-1.0, -0.9), (-1.0, -0.9), 1, 10)
            .is_err());
    }

    #[test]
    fn sweep_outside_safety_fails() {
        let mut d = Device::new(new_random_device(1, None), 0);
        let err = d.sweep_1d(Gate::LB, 0.0, -2.5, 10).unwrap_err();
        assert!(matches!(err, Error::SafetyViolation { .. }));
    }

    #[test]
    fn unresponsive_gate_gives_flat_saturated_trace() {
        let mut d = Device::new(new_random_device(2, Some(FaultFlags::unresponsive(Gate::LB))), 0)
            .noiseless();
        d.set_voltage(Gate::TB, -3.0).unwrap();
        let s = d.sweep_1d(Gate::LB, 0.0, -2.0, 50).unwrap();
        assert!(s.currents.iter().all(|&i| (i - s.currents[0]).abs() < 1e-12));
        assert!(s.currents[0] > 0.9);
    }

    #[test]
    fn noiseless_sessions_are_bit_identical() {
        let p = new_random_device(3, None);
        let mut a = Device::new(p.clone(), 1).noiseless();
        let mut b = Device::new(p, 99).noiseless();
        let sa = a.sweep_1d(Gate::CB, 0.0, -2.0, 101).unwrap();
        let sb = b.sweep_1d(Gate::CB, 0.0, -2.0, 101).unwrap();
        assert_eq!(sa, sb);
    }

    #[test]
    fn safety_shift_moves_ranges() {
        let mut d = Device::new(new_random_device(3, None), 0);
        d.set_voltage(Gate::TB, -3.0).unwrap();
        d.shift_safety(0.5);
        assert_eq!(d.safety().tb, VoltageRange::new(-2.5, 0.5));
        assert_eq!(d.voltage(Gate::TB), -2.5);
    }
}
