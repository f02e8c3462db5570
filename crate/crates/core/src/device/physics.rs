use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DeviceLayout, DevicePhysics, FaultFlags, Gate, GateMap, Regime, VoltageRange};
use crate::{Error, Result};

/// Below this interdot coupling the oracle reports a double dot.
pub const KAPPA_SPLIT: f64 = 0.5;
/// At or above this interdot coupling the oracle reports a single dot.
pub const KAPPA_MERGE: f64 = 0.5;

/// Outer barriers confine the dots while their transmission is inside this window.
pub(crate) const TUNNEL_MIN: f64 = 0.01;
pub(crate) const TUNNEL_MAX: f64 = 0.5;
/// Smallest envelope current (normalized) for which transport is resolvable.
pub(crate) const ENVELOPE_MIN: f64 = 0.002;

const CONFINEMENT_WIDTH: f64 = 0.05;
const BLEND_WIDTH: f64 = 0.04;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

/// Draws a device whose un-faulted gates can each pinch the channel inside
/// their safety range once the top barrier sits at its lower limit.
pub fn new_random_device(seed: u64, faults: Option<FaultFlags>) -> DevicePhysics {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d07_u64);
    let faults = faults.unwrap_or_default();
    let layout = DeviceLayout::default();

    let mut centers = GateMap::splat(0.0);
    let mut widths = GateMap::splat(0.0);
    let mut tb_coupling = GateMap::splat(0.0);
    for g in Gate::LOWER {
        if g.is_plunger() {
            centers[g] = uniform(&mut rng, -2.35, -2.05);
            widths[g] = uniform(&mut rng, 0.035, 0.05);
            tb_coupling[g] = uniform(&mut rng, 0.42, 0.52);
        } else {
            centers[g] = uniform(&mut rng, -2.45, -2.15);
            widths[g] = uniform(&mut rng, 0.05, 0.075);
            tb_coupling[g] = uniform(&mut rng, 0.45, 0.55);
        }
    }

    let mut cross = [[0.0; 6]; 6];
    let chain = [Gate::LB, Gate::LP, Gate::CB, Gate::RP, Gate::RB];
    for pair in chain.windows(2) {
        let (a, b) = (pair[0].index(), pair[1].index());
        cross[a][b] = uniform(&mut rng, 0.02, 0.05);
        cross[b][a] = uniform(&mut rng, 0.02, 0.05);
    }

    let e_c1 = uniform(&mut rng, 1.0, 1.3);
    let e_c2 = uniform(&mut rng, 1.0, 1.3);
    let e_cm = uniform(&mut rng, 0.2, 0.35) * e_c1.min(e_c2);
    let l11 = uniform(&mut rng, 26.0, 34.0);
    let l22 = uniform(&mut rng, 26.0, 34.0);
    let l12 = uniform(&mut rng, 0.25, 0.4) * l11;
    let l21 = uniform(&mut rng, 0.25, 0.4) * l22;
    let occupancy_offset = [uniform(&mut rng, -0.3, 0.3), uniform(&mut rng, -0.3, 0.3)];
    let kappa_shift = uniform(&mut rng, 0.3, 0.8);

    let mut center_offsets = GateMap::splat(0.0);
    if faults.offset_charge {
        for g in Gate::LOWER {
            center_offsets[g] = uniform(&mut rng, 0.6, 0.9);
        }
    }

    DevicePhysics {
        schema_version: DevicePhysics::SCHEMA_VERSION,
        seed,
        layout,
        centers,
        widths,
        center_offsets,
        tb_coupling,
        cross,
        e_c1,
        e_c2,
        e_cm,
        lever: [[l11, l12], [l21, l22]],
        occupancy_offset,
        kappa_shift,
        broadening: 0.006,
        a_sat: 1.0,
        noise_sigma: 0.005,
        drift_sigma: 0.0,
        faults,
    }
}

/// A device whose left and right halves are exact mirror images.
pub fn new_symmetric_device(seed: u64) -> DevicePhysics {
    let mut p = new_random_device(seed, None);
    p.centers.rb = p.centers.lb;
    p.widths.rb = p.widths.lb;
    p.tb_coupling.rb = p.tb_coupling.lb;
    p.centers.rp = p.centers.lp;
    p.widths.rp = p.widths.lp;
    p.tb_coupling.rp = p.tb_coupling.lp;
    let (lb, lp, cb, rp, rb) = (
        Gate::LB.index(),
        Gate::LP.index(),
        Gate::CB.index(),
        Gate::RP.index(),
        Gate::RB.index(),
    );
    p.cross[rb][rp] = p.cross[lb][lp];
    p.cross[rp][rb] = p.cross[lp][lb];
    p.cross[rp][cb] = p.cross[lp][cb];
    p.cross[cb][rp] = p.cross[cb][lp];
    p.e_c2 = p.e_c1;
    p.lever[1][1] = p.lever[0][0];
    p.lever[1][0] = p.lever[0][1];
    p.occupancy_offset[1] = p.occupancy_offset[0];
    p
}

/// Occupancy of the ground state and proximity to the nearest charge
/// transitions at one plunger point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChargeSolution {
    /// Gate-induced charge of each dot.
    pub induced: [f64; 2],
    /// Ground-state occupation of the double dot.
    pub occupation: [u32; 2],
    /// Distance (volts) to the nearest dot-1 and dot-2 addition lines.
    pub line_distance: [f64; 2],
    /// Distance (volts) to the nearest addition line of the merged single dot.
    pub merged_distance: f64,
}

impl DevicePhysics {
    /// Voltages a gate actually applies, accounting for disconnected gates.
    fn applied(&self, v: &GateMap<f64>) -> GateMap<f64> {
        let mut a = *v;
        if let Some(g) = self.faults.unresponsive_gate {
            a[g] = self.layout.safety[g].max;
        }
        a
    }

    /// Effective channel voltage under gate `g` relative to its pinch-off centre.
    pub(crate) fn channel_offset(&self, g: Gate, v: &GateMap<f64>) -> f64 {
        let a = self.applied(v);
        let mut eff = a[g] + self.tb_coupling[g] * a[Gate::TB];
        for src in Gate::LOWER {
            eff += self.cross[g.index()][src.index()] * a[src];
        }
        eff - (self.centers[g] + self.center_offsets[g])
    }

    /// Logistic transmission of the channel under lower gate `g`.
    pub fn transmission(&self, g: Gate, v: &GateMap<f64>) -> f64 {
        debug_assert!(g != Gate::TB);
        sigmoid(self.channel_offset(g, v) / self.widths[g])
    }

    /// Interdot coupling in `[0, 1]`, monotone in the central barrier's openness.
    pub fn kappa(&self, v: &GateMap<f64>) -> f64 {
        let z = self.channel_offset(Gate::CB, v) / self.widths[Gate::CB];
        sigmoid(z - self.kappa_shift)
    }

    /// Product of the five lower-gate transmissions times the saturation current.
    pub fn envelope(&self, v: &GateMap<f64>) -> f64 {
        if self.faults.dead_channel {
            return 0.0;
        }
        self.a_sat
            * Gate::LOWER
                .iter()
                .map(|&g| self.transmission(g, v))
                .product::<f64>()
    }

    fn confinement(&self, v: &GateMap<f64>) -> f64 {
        let q = |t: f64| sigmoid((TUNNEL_MAX - t) / CONFINEMENT_WIDTH);
        q(self.transmission(Gate::LB, v)) * q(self.transmission(Gate::RB, v))
    }

    fn energy(&self, n: [f64; 2], occ: [i64; 2]) -> f64 {
        let d1 = occ[0] as f64 - n[0];
        let d2 = occ[1] as f64 - n[1];
        0.5 * self.e_c1 * d1 * d1 + 0.5 * self.e_c2 * d2 * d2 + self.e_cm * d1 * d2
    }

    /// Gate-induced charge of each dot from the plunger channel offsets.
    pub fn induced_charge(&self, v: &GateMap<f64>) -> [f64; 2] {
        let u = [
            self.channel_offset(Gate::LP, v) + 2.0 * self.widths.lp,
            self.channel_offset(Gate::RP, v) + 2.0 * self.widths.rp,
        ];
        [
            self.lever[0][0] * u[0] + self.lever[0][1] * u[1] + self.occupancy_offset[0],
            self.lever[1][0] * u[0] + self.lever[1][1] * u[1] + self.occupancy_offset[1],
        ]
    }

    /// Constant-interaction ground state and transition distances.
    pub fn charge_state(&self, v: &GateMap<f64>) -> ChargeSolution {
        let n = self.induced_charge(v);
        let lo = |x: f64| (x.floor() as i64 - 1).max(0);
        let hi = |x: f64| (x.floor() as i64 + 2).max(1);
        let mut best = (f64::INFINITY, [0i64, 0i64]);
        for n1 in lo(n[0])..=hi(n[0]) {
            for n2 in lo(n[1])..=hi(n[1]) {
                let e = self.energy(n, [n1, n2]);
                if e < best.0 {
                    best = (e, [n1, n2]);
                }
            }
        }
        let (u0, occ) = best;

        // Energy gradients (per volt of plunger) of the two addition lines.
        let grad = |a: f64, b: f64| -> f64 {
            let gx = a * self.lever[0][0] + b * self.lever[1][0];
            let gy = a * self.lever[0][1] + b * self.lever[1][1];
            (gx * gx + gy * gy).sqrt()
        };
        let g1 = grad(self.e_c1, self.e_cm);
        let g2 = grad(self.e_cm, self.e_c2);

        let mut dist = [f64::INFINITY; 2];
        for (dot, step) in [(0usize, [1i64, 0i64]), (1, [0, 1])] {
            for sign in [1i64, -1] {
                let cand = [occ[0] + sign * step[0], occ[1] + sign * step[1]];
                if cand[0] < 0 || cand[1] < 0 {
                    continue;
                }
                let de = (self.energy(n, cand) - u0).abs();
                let g = if dot == 0 { g1 } else { g2 };
                dist[dot] = dist[dot].min(de / g);
            }
        }

        let total = n[0] + n[1];
        let n_merged = total.round().max(0.0);
        let mut dn = (total - (n_merged + 0.5)).abs();
        if n_merged >= 1.0 {
            dn = dn.min((total - (n_merged - 0.5)).abs());
        }
        let gx = self.lever[0][0] + self.lever[1][0];
        let gy = self.lever[0][1] + self.lever[1][1];
        let merged_distance = dn / (gx * gx + gy * gy).sqrt();

        ChargeSolution {
            induced: n,
            occupation: [occ[0] as u32, occ[1] as u32],
            line_distance: dist,
            merged_distance,
        }
    }

    /// Coulomb-resonance factor before confinement fading, in `[0, 1]`.
    pub fn resonance(&self, v: &GateMap<f64>) -> f64 {
        let cs = self.charge_state(v);
        let line = |d: f64| {
            let r = d / self.broadening;
            (-0.5 * r * r).exp()
        };
        let l1 = line(cs.line_distance[0]);
        let l2 = line(cs.line_distance[1]);
        let double = 0.6 * l1.max(l2) + 0.4 * l1 * l2;
        let single = line(cs.merged_distance);
        let w = sigmoid((self.kappa(v) - 0.5) / BLEND_WIDTH);
        w * single + (1.0 - w) * double
    }

    /// Noiseless current at `v`, no range checks.
    pub fn noiseless_current(&self, v: &GateMap<f64>) -> f64 {
        let env = self.envelope(v);
        if env == 0.0 {
            return 0.0;
        }
        let q = self.confinement(v);
        let r = 1.0 - q + q * self.resonance(v);
        (env * r).clamp(0.0, self.a_sat)
    }

    /// Current at `v` after checking every voltage against `safety`. Noise is
    /// added when an rng is supplied; the result is clamped to
    /// `[0, A_sat (1 + 4 sigma)]`.
    pub fn conductance<R: Rng>(
        &self,
        v: &GateMap<f64>,
        safety: &GateMap<VoltageRange>,
        rng: Option<&mut R>,
    ) -> Result<f64> {
        check_safety(v, safety)?;
        let clean = self.noiseless_current(v);
        let Some(rng) = rng else {
            return Ok(clean);
        };
        let noisy = if self.noise_sigma > 0.0 {
            let n = Normal::new(0.0, self.noise_sigma).expect("finite sigma");
            clean + n.sample(rng)
        } else {
            clean
        };
        Ok(noisy.clamp(0.0, self.a_sat * (1.0 + 4.0 * self.noise_sigma)))
    }

    /// Ground-truth regime at `v`, computed from the hidden parameters only.
    pub fn oracle_regime(&self, v: &GateMap<f64>) -> Regime {
        if self.faults.dead_channel || self.envelope(v) < ENVELOPE_MIN {
            return Regime::NoDot;
        }
        let tunneling = |g| {
            let t = self.transmission(g, v);
            (TUNNEL_MIN..=TUNNEL_MAX).contains(&t)
        };
        if !tunneling(Gate::LB) || !tunneling(Gate::RB) {
            return Regime::NoDot;
        }
        let n = self.induced_charge(v);
        let kappa = self.kappa(v);
        if kappa < KAPPA_SPLIT {
            if n[0] >= 0.5 && n[1] >= 0.5 && self.transmission(Gate::CB, v) >= TUNNEL_MIN {
                return Regime::DoubleDot;
            }
            return Regime::NoDot;
        }
        if kappa >= KAPPA_MERGE && n[0] + n[1] >= 0.5 {
            return Regime::SingleDot;
        }
        Regime::NoDot
    }
}

pub(crate) fn check_safety(v: &GateMap<f64>, safety: &GateMap<VoltageRange>) -> Result<()> {
    for g in Gate::ALL {
        let r = safety[g];
        if !v[g].is_finite() || !r.contains(v[g]) {
            return Err(Error::SafetyViolation {
                gate: g,
                voltage: v[g],
                min: r.min,
                max: r.max,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn all_at(p: &DevicePhysics, pick: impl Fn(VoltageRange) -> f64) -> GateMap<f64> {
        p.layout.safety.map(|_, r| pick(*r))
    }

    #[test]
    fn same_seed_same_device() {
        assert_eq!(new_random_device(1, None), new_random_device(1, None));
        assert_ne!(new_random_device(1, None), new_random_device(2, None));
    }

    #[test]
    fn fully_open_device_saturates() {
        let p = new_random_device(1, None);
        let v = all_at(&p, |r| r.max);
        let i = p
            .conductance::<ChaCha8Rng>(&v, &p.layout.safety, None)
            .unwrap();
        assert!((i - 1.0).abs() < 1e-6, "{i}");
    }

    #[test]
    fn opaque_barrier_blocks_current() {
        let p = new_random_device(1, None);
        let mut v = all_at(&p, |r| r.max);
        v.tb = p.layout.safety.tb.min;
        v.lb = p.layout.safety.lb.min;
        assert!(p.noiseless_current(&v) < p.layout.noise_floor);
    }

    #[test]
    fn dead_channel_never_conducts() {
        let p = new_random_device(1, Some(FaultFlags::dead()));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let v = p.layout.safety.map(|_, r| rng.gen_range(r.min..=r.max));
            assert!(p.noiseless_current(&v) < p.layout.noise_floor);
        }
    }

    #[test]
    fn out_of_range_is_an_error() {
        let p = new_random_device(4, None);
        let mut v = all_at(&p, |r| r.max);
        v.cb = 0.3;
        let err = p
            .conductance::<ChaCha8Rng>(&v, &p.layout.safety, None)
            .unwrap_err();
        assert!(matches!(err, Error::SafetyViolation { gate: Gate::CB, .. }));
    }

    #[test]
    fn open_barriers_are_no_dot() {
        let p = new_random_device(5, None);
        let v = all_at(&p, |r| r.max);
        assert_eq!(p.oracle_regime(&v), Regime::NoDot);
    }

    #[test]
    fn json_round_trip() {
        let p = new_random_device(8, Some(FaultFlags::unresponsive(Gate::TB)));
        let back = DevicePhysics::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(p, back);
    }
}
