//! Constant-interaction simulator of a six-gate double quantum dot.
//!
//! The simulator stands in for the cryostat: it returns a normalized current for
//! any legal gate configuration and exposes a ground-truth regime oracle that the
//! tuning stack itself never consults.
//!
//! The current model is
//!
//! ```text
//! I = A_sat * T_LB * T_CB * T_RB * T_LP * T_RP * R_eff(V_LP, V_RP, kappa) + noise
//! ```
//!
//! where each `T_g` is a logistic transmission in the gate's effective voltage
//! (own voltage plus top-barrier and neighbour cross-coupling) and `R_eff` is the
//! Coulomb-resonance factor. `R_eff` fades to 1 when the outer barriers are open
//! (no confinement) and otherwise blends diagonal single-dot stripes with the
//! double-dot honeycomb according to the interdot coupling `kappa`, which is set
//! by the central barrier's transparency.

mod fixture;
mod physics;
mod session;

use serde::{Deserialize, Serialize};
use std::fmt;
use std::ops::{Index, IndexMut};

pub use fixture::{RegimeTarget, VoltagePlanner};
pub use physics::{ChargeSolution, KAPPA_MERGE, KAPPA_SPLIT};
pub use session::{Device, DeviceState, RawMap, RawSweep};

/// Gate identifiers in layout order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Gate {
    TB,
    LB,
    CB,
    RB,
    LP,
    RP,
}

impl Gate {
    pub const ALL: [Gate; 6] = [Gate::TB, Gate::LB, Gate::CB, Gate::RB, Gate::LP, Gate::RP];
    /// Gates below the top barrier, in characterization order.
    pub const LOWER: [Gate; 5] = [Gate::LB, Gate::CB, Gate::RB, Gate::LP, Gate::RP];
    pub const BARRIERS: [Gate; 3] = [Gate::LB, Gate::CB, Gate::RB];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_plunger(self) -> bool {
        matches!(self, Gate::LP | Gate::RP)
    }
}

impl fmt::Display for Gate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Gate::TB => "TB",
            Gate::LB => "LB",
            Gate::CB => "CB",
            Gate::RB => "RB",
            Gate::LP => "LP",
            Gate::RP => "RP",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Gate {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "TB" => Ok(Gate::TB),
            "LB" => Ok(Gate::LB),
            "CB" => Ok(Gate::CB),
            "RB" => Ok(Gate::RB),
            "LP" => Ok(Gate::LP),
            "RP" => Ok(Gate::RP),
            other => Err(format!("unknown gate {other:?}")),
        }
    }
}

/// One value per gate, serialized as a named object.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateMap<T> {
    #[serde(rename = "TB")]
    pub tb: T,
    #[serde(rename = "LB")]
    pub lb: T,
    #[serde(rename = "CB")]
    pub cb: T,
    #[serde(rename = "RB")]
    pub rb: T,
    #[serde(rename = "LP")]
    pub lp: T,
    #[serde(rename = "RP")]
    pub rp: T,
}

impl<T: Copy> GateMap<T> {
    pub fn splat(v: T) -> Self {
        Self {
            tb: v,
            lb: v,
            cb: v,
            rb: v,
            lp: v,
            rp: v,
        }
    }
}

impl<T> GateMap<T> {
    pub fn from_fn(mut f: impl FnMut(Gate) -> T) -> Self {
        Self {
            tb: f(Gate::TB),
            lb: f(Gate::LB),
            cb: f(Gate::CB),
            rb: f(Gate::RB),
            lp: f(Gate::LP),
            rp: f(Gate::RP),
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(Gate, &T) -> U) -> GateMap<U> {
        GateMap::from_fn(|g| f(g, &self[g]))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Gate, &T)> {
        Gate::ALL.into_iter().map(move |g| (g, &self[g]))
    }
}

impl<T> Index<Gate> for GateMap<T> {
    type Output = T;

    fn index(&self, g: Gate) -> &T {
        match g {
            Gate::TB => &self.tb,
            Gate::LB => &self.lb,
            Gate::CB => &self.cb,
            Gate::RB => &self.rb,
            Gate::LP => &self.lp,
            Gate::RP => &self.rp,
        }
    }
}

impl<T> IndexMut<Gate> for GateMap<T> {
    fn index_mut(&mut self, g: Gate) -> &mut T {
        match g {
            Gate::TB => &mut self.tb,
            Gate::LB => &mut self.lb,
            Gate::CB => &mut self.cb,
            Gate::RB => &mut self.rb,
            Gate::LP => &mut self.lp,
            Gate::RP => &mut self.rp,
        }
    }
}

/// Closed voltage interval `[min, max]` in volts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoltageRange {
    pub min: f64,
    pub max: f64,
}

impl VoltageRange {
    pub fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min - 1e-12 && v <= self.max + 1e-12
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.min, self.max)
    }

    pub fn span(&self) -> f64 {
        self.max - self.min
    }

    pub fn shifted(&self, delta: f64) -> Self {
        Self::new(self.min + delta, self.max + delta)
    }
}

/// Regime labels shared by the oracle and the classifier combination logic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Regime {
    NoDot,
    SingleDot,
    DoubleDot,
}

/// Static wiring information for one device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceLayout {
    pub safety: GateMap<VoltageRange>,
    /// Setup noise floor in normalized current units.
    pub noise_floor: f64,
}

impl Default for DeviceLayout {
    fn default() -> Self {
        let lower = VoltageRange::new(-2.0, 0.0);
        Self {
            safety: GateMap {
                tb: VoltageRange::new(-3.0, 0.0),
                lb: lower,
                cb: lower,
                rb: lower,
                lp: lower,
                rp: lower,
            },
            noise_floor: 0.02,
        }
    }
}

impl DeviceLayout {
    pub fn validate(&self) -> crate::Result<()> {
        for (g, r) in self.safety.iter() {
            if !(r.min < r.max) {
                return Err(crate::Error::Config(format!(
                    "safety range of {g} is empty: [{}, {}]",
                    r.min, r.max
                )));
            }
        }
        if !(self.noise_floor > 0.0) {
            return Err(crate::Error::Config("noise floor must be positive".into()));
        }
        Ok(())
    }
}

/// Injected failure modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultFlags {
    /// No current flows regardless of gate voltages.
    #[serde(default)]
    pub dead_channel: bool,
    /// The gate is electrically disconnected and acts as if held at its
    /// layout upper limit.
    #[serde(default)]
    pub unresponsive_gate: Option<Gate>,
    /// Static offset charges shift the pinch-off centres of the lower gates
    /// towards positive voltages.
    #[serde(default)]
    pub offset_charge: bool,
}

impl FaultFlags {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn dead() -> Self {
        Self {
            dead_channel: true,
            ..Self::default()
        }
    }

    pub fn unresponsive(g: Gate) -> Self {
        Self {
            unresponsive_gate: Some(g),
            ..Self::default()
        }
    }

    pub fn offset_charge() -> Self {
        Self {
            offset_charge: true,
            ..Self::default()
        }
    }
}

/// Hidden parameters of one simulated device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DevicePhysics {
    pub schema_version: u32,
    pub seed: u64,
    pub layout: DeviceLayout,
    /// Pinch-off centre of each lower gate's channel (volts of effective voltage).
    /// The `tb` entry is unused.
    pub centers: GateMap<f64>,
    /// Logistic transition width of each lower gate (volts).
    pub widths: GateMap<f64>,
    /// Static pinch-off centre shifts from offset charges (volts).
    pub center_offsets: GateMap<f64>,
    /// Capacitive coupling of the top barrier into each lower gate's channel.
    pub tb_coupling: GateMap<f64>,
    /// Neighbour cross-coupling, `cross[target][source]`, indexed by `Gate::index`.
    pub cross: [[f64; 6]; 6],
    /// Charging energies of the two dots and their mutual term.
    pub e_c1: f64,
    pub e_c2: f64,
    pub e_cm: f64,
    /// Plunger lever arms, `lever[dot][plunger]` in electrons per volt of
    /// effective plunger voltage.
    pub lever: [[f64; 2]; 2],
    /// Gate-induced charge of each dot at the plunger depletion point.
    pub occupancy_offset: [f64; 2],
    /// Interdot coupling `kappa = sigma(z_CB - kappa_shift)`.
    pub kappa_shift: f64,
    /// Thermal broadening of charge transitions, in volts perpendicular to a line.
    pub broadening: f64,
    pub a_sat: f64,
    /// Standard deviation of additive Gaussian measurement noise.
    pub noise_sigma: f64,
    /// Per-measurement random-walk step of slow drift; 0 disables drift.
    pub drift_sigma: f64,
    pub faults: FaultFlags,
}

impl DevicePhysics {
    pub const SCHEMA_VERSION: u32 = 1;

    pub fn to_json(&self) -> crate::Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> crate::Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        if p.schema_version != Self::SCHEMA_VERSION {
            return Err(crate::Error::Serialization(format!(
                "unsupported device schema version {}",
                p.schema_version
            )));
        }
        p.layout.validate()?;
        Ok(p)
    }
}

pub use physics::new_random_device;
pub use physics::new_symmetric_device;
