//! Charge stability diagrams over the two plungers.
//!
//! Acquisition follows a closed loop: sweep the plunger window, compare the
//! mean current along each edge of the map against the target window and
//! shift the plunger ranges until every edge lies inside it. The accepted map
//! is cut into fixed 0.05 V tiles of 28×28 pixels for classification.

use serde::{Deserialize, Serialize};

use crate::device::{Device, Gate, GateMap, RawMap, Regime, VoltageRange};
use crate::ml::BinaryClassifier;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChargeMapConfig {
    /// Minimum number of setpoints per axis.
    pub base_points: usize,
    /// Largest allowed setpoint spacing in volts.
    pub delta_v_max: f64,
    /// Accepted edge-mean current window, in units of `A_max`.
    pub current_window: (f64, f64),
    /// Edge length of one classification tile in volts.
    pub segment_size: f64,
    /// Pixels per tile edge.
    pub pixel_size: usize,
}

impl Default for ChargeMapConfig {
    fn default() -> Self {
        Self {
            base_points: 50,
            delta_v_max: 0.005,
            current_window: (0.004, 0.1),
            segment_size: 0.05,
            pixel_size: 28,
        }
    }
}

impl ChargeMapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_v_max > 0.0) {
            return Err(Error::Config("delta_v_max must be positive".into()));
        }
        let (lo, hi) = self.current_window;
        if !(lo < hi) {
            return Err(Error::Config(format!("current window [{lo}, {hi}] is empty")));
        }
        if !(self.segment_size > 0.0) || self.pixel_size == 0 || self.base_points < 2 {
            return Err(Error::Config("segment and sampling sizes must be positive".into()));
        }
        Ok(())
    }

    /// Physical width of one tile pixel.
    pub fn pixel_pitch(&self) -> f64 {
        self.segment_size / self.pixel_size as f64
    }

    /// Full tiles that fit into `span` volts.
    pub fn tiles_in(&self, span: f64) -> usize {
        (span / self.segment_size + 1e-9).floor().max(0.0) as usize
    }
}

/// Equidistant setpoints over `[v_lo, v_hi]`, refined until the spacing is at
/// most `delta_v_max`.
pub fn plan_setpoints(v_lo: f64, v_hi: f64, cfg: &ChargeMapConfig) -> Result<Vec<f64>> {
    if !(v_lo < v_hi) {
        return Err(Error::InvalidArgument(format!("empty setpoint range [{v_lo}, {v_hi}]")));
    }
    let needed = ((v_hi - v_lo) / cfg.delta_v_max - 1e-9).ceil() as usize + 1;
    let n = cfg.base_points.max(needed);
    Ok((0..n)
        .map(|i| {
            if i + 1 == n {
                v_hi
            } else {
                v_lo + (v_hi - v_lo) * i as f64 / (n - 1) as f64
            }
        })
        .collect())
}

/// A normalized 2D current map, `current[iy * x.len() + ix]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurrentMap {
    pub id: u64,
    pub x_gate: Gate,
    pub y_gate: Gate,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub current: Vec<f64>,
    pub a_max: f64,
}

impl CurrentMap {
    pub fn from_raw(raw: RawMap, a_max: f64, id: u64) -> Result<Self> {
        if !(a_max > 0.0) || !a_max.is_finite() {
            return Err(Error::InvalidNormalization(a_max));
        }
        let map = Self {
            id,
            x_gate: raw.x_gate,
            y_gate: raw.y_gate,
            current: raw.current.iter().map(|i| i / a_max).collect(),
            x: raw.x,
            y: raw.y,
            a_max,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.len() < 2 || self.y.len() < 2 {
            return Err(Error::Shape("a current map needs at least 2×2 points".into()));
        }
        if self.current.len() != self.x.len() * self.y.len() {
            return Err(Error::Shape(format!(
                "{} values for a {}×{} grid",
                self.current.len(),
                self.x.len(),
                self.y.len()
            )));
        }
        let ascending = |v: &[f64]| v.windows(2).all(|w| w[0] < w[1]);
        if !ascending(&self.x) || !ascending(&self.y) {
            return Err(Error::Shape("map setpoints must be strictly ascending".into()));
        }
        if self.current.iter().any(|c| !c.is_finite()) {
            return Err(Error::Shape("map contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn nx(&self) -> usize {
        self.x.len()
    }

    pub fn ny(&self) -> usize {
        self.y.len()
    }

    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        self.current[iy * self.x.len() + ix]
    }

    pub fn span_x(&self) -> f64 {
        self.x[self.x.len() - 1] - self.x[0]
    }

    pub fn span_y(&self) -> f64 {
        self.y[self.y.len() - 1] - self.y[0]
    }

    pub fn mean(&self) -> f64 {
        self.current.iter().sum::<f64>() / self.current.len() as f64
    }

    /// Bilinear interpolation at `(vx, vy)`, clamped to the map extent.
    pub fn sample(&self, vx: f64, vy: f64) -> f64 {
        let (ix, tx) = bracket(&self.x, vx);
        let (iy, ty) = bracket(&self.y, vy);
        let c00 = self.at(ix, iy);
        let c10 = self.at(ix + 1, iy);
        let c01 = self.at(ix, iy + 1);
        let c11 = self.at(ix + 1, iy + 1);
        (1.0 - ty) * ((1.0 - tx) * c00 + tx * c10) + ty * ((1.0 - tx) * c01 + tx * c11)
    }

    /// Resamples onto pixel centres spaced `cfg.pixel_pitch()` apart, so that
    /// every full tile covers exactly `pixel_size × pixel_size` pixels.
    pub fn resampled(&self, cfg: &ChargeMapConfig) -> Result<CurrentMap> {
        let pitch = cfg.pixel_pitch();
        let axis = |v: &[f64]| -> Vec<f64> {
            let span = v[v.len() - 1] - v[0];
            let n = (span / pitch + 1e-9).floor() as usize;
            (0..n).map(|i| v[0] + (i as f64 + 0.5) * pitch).collect()
        };
        let x = axis(&self.x);
        let y = axis(&self.y);
        if x.len() < 2 || y.len() < 2 {
            return Err(Error::Shape("map is smaller than two pixels".into()));
        }
        let current = y
            .iter()
            .flat_map(|&vy| x.iter().map(move |&vx| (vx, vy)))
            .map(|(vx, vy)| self.sample(vx, vy))
            .collect();
        Ok(CurrentMap {
            id: self.id,
            x_gate: self.x_gate,
            y_gate: self.y_gate,
            x,
            y,
            current,
            a_max: self.a_max,
        })
    }

    /// Grid of currents with `y` rows and `x` columns, preceded by a header
    /// row of `x` setpoints; the first column holds `y`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("y\\x");
        for x in &self.x {
            s.push_str(&format!(",{x}"));
        }
        s.push('\n');
        for (iy, y) in self.y.iter().enumerate() {
            s.push_str(&y.to_string());
            for ix in 0..self.nx() {
                s.push_str(&format!(",{}", self.at(ix, iy)));
            }
            s.push('\n');
        }
        s
    }
}

/// Index of the lower grid point and the fractional position inside the cell.
fn bracket(axis: &[f64], v: f64) -> (usize, f64) {
    let n = axis.len();
    let v = v.clamp(axis[0], axis[n - 1]);
    let i = match axis.binary_search_by(|a| a.total_cmp(&v)) {
        Ok(i) => i.min(n - 2),
        Err(i) => i.saturating_sub(1).min(n - 2),
    };
    let t = (v - axis[i]) / (axis[i + 1] - axis[i]);
    (i, t.clamp(0.0, 1.0))
}

/// Mean current along each edge of a map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryStats {
    pub left: f64,
    pub right: f64,
    pub bottom: f64,
    pub top: f64,
}

impl BoundaryStats {
    pub fn all_within(&self, window: (f64, f64)) -> bool {
        [self.left, self.right, self.bottom, self.top]
            .iter()
            .all(|&m| m >= window.0 && m <= window.1)
    }
}

/// Means of the outermost column or row on each side. Left and right refer to
/// the lowest and highest `x`, bottom and top to the lowest and highest `y`.
pub fn boundary_averages(map: &CurrentMap) -> BoundaryStats {
    let (nx, ny) = (map.nx(), map.ny());
    let col = |ix: usize| (0..ny).map(|iy| map.at(ix, iy)).sum::<f64>() / ny as f64;
    let row = |iy: usize| (0..nx).map(|ix| map.at(ix, iy)).sum::<f64>() / nx as f64;
    BoundaryStats {
        left: col(0),
        right: col(nx - 1),
        bottom: row(0),
        top: row(ny - 1),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeAction {
    Decrease,
    Increase,
    Keep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    InWindow,
    SafetyLimit,
    MaxIterations,
}

/// Outcome of one range adjustment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeUpdate {
    pub stats: BoundaryStats,
    pub lp_action: RangeAction,
    pub rp_action: RangeAction,
    pub lp: (f64, f64),
    pub rp: (f64, f64),
    /// `None` while the loop should continue with the new ranges.
    pub terminated_reason: Option<Termination>,
}

/// Which way an edge pair asks the window to move.
///
/// The high-current test on the low edge and the low-current test on the high
/// edge come first; decreasing wins when both fire. If neither fires but an
/// edge is still outside the window, the mirrored tests move the window the
/// other way.
fn edge_action(low_edge: f64, high_edge: f64, window: (f64, f64)) -> RangeAction {
    let (lo, hi) = window;
    if low_edge > hi {
        RangeAction::Decrease
    } else if high_edge < lo {
        RangeAction::Increase
    } else if low_edge < lo && high_edge <= hi {
        RangeAction::Increase
    } else if high_edge > hi && low_edge >= lo {
        RangeAction::Decrease
    } else {
        RangeAction::Keep
    }
}

/// Applies the edge rules: one segment-size shift per plunger and iteration,
/// both endpoints moved together and clamped at the safety limits.
pub fn adjust_ranges(
    stats: &BoundaryStats,
    lp: (f64, f64),
    rp: (f64, f64),
    cfg: &ChargeMapConfig,
    safety: &GateMap<VoltageRange>,
) -> RangeUpdate {
    let window = cfg.current_window;
    let lp_action = edge_action(stats.left, stats.right, window);
    let rp_action = edge_action(stats.bottom, stats.top, window);

    let shift = |range: (f64, f64), action: RangeAction, limits: VoltageRange| -> ((f64, f64), bool) {
        let delta = match action {
            RangeAction::Decrease => -cfg.segment_size,
            RangeAction::Increase => cfg.segment_size,
            RangeAction::Keep => return (range, false),
        };
        let allowed = if delta < 0.0 {
            delta.max(limits.min - range.0)
        } else {
            delta.min(limits.max - range.1)
        };
        if allowed.abs() < 1e-12 {
            return (range, true);
        }
        ((range.0 + allowed, range.1 + allowed), false)
    };
    let (new_lp, lp_blocked) = shift(lp, lp_action, safety[Gate::LP]);
    let (new_rp, rp_blocked) = shift(rp, rp_action, safety[Gate::RP]);

    let terminated_reason = if stats.all_within(window) {
        Some(Termination::InWindow)
    } else if (lp_blocked || lp_action == RangeAction::Keep)
        && (rp_blocked || rp_action == RangeAction::Keep)
        && (lp_blocked || rp_blocked)
    {
        Some(Termination::SafetyLimit)
    } else {
        None
    };
    RangeUpdate {
        stats: *stats,
        lp_action,
        rp_action,
        lp: new_lp,
        rp: new_rp,
        terminated_reason,
    }
}

/// Final map of an acquisition loop with its adjustment history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Acquisition {
    /// The last measured map at native resolution.
    pub map: CurrentMap,
    /// `map` resampled onto the tile pixel grid.
    pub pixels: CurrentMap,
    pub history: Vec<RangeUpdate>,
    pub termination: Termination,
    pub lp: (f64, f64),
    pub rp: (f64, f64),
}

/// Measures the plunger map and re-centres the window until its edges are
/// inside the current window, a safety limit blocks the shift or
/// `max_adjust_iters` adjustments have been made.
pub fn acquire_diagram(
    device: &mut Device,
    mut lp: (f64, f64),
    mut rp: (f64, f64),
    cfg: &ChargeMapConfig,
    max_adjust_iters: usize,
) -> Result<Acquisition> {
    cfg.validate()?;
    let a_max = device
        .a_max()
        .ok_or_else(|| Error::InvalidArgument("A_max has not been measured".into()))?;
    let mut history = Vec::new();
    loop {
        let xs = plan_setpoints(lp.0, lp.1, cfg)?;
        let ys = plan_setpoints(rp.0, rp.1, cfg)?;
        let raw = device.sweep_2d(Gate::LP, Gate::RP, lp, rp, xs.len(), ys.len())?;
        let map = CurrentMap::from_raw(raw, a_max, device.n_2d() as u64)?;
        let update = adjust_ranges(&boundary_averages(&map), lp, rp, cfg, device.safety());
        history.push(update);
        let termination = match update.terminated_reason {
            Some(t) => Some(t),
            None if history.len() > max_adjust_iters => Some(Termination::MaxIterations),
            None => None,
        };
        if let Some(termination) = termination {
            return Ok(Acquisition {
                pixels: map.resampled(cfg)?,
                map,
                history,
                termination,
                lp,
                rp,
            });
        }
        lp = update.lp;
        rp = update.rp;
    }
}

/// One fixed-size classification tile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    /// Lower-left corner `(V_LP, V_RP)` in volts.
    pub origin: (f64, f64),
    /// `pixel_size²` currents, row-major with rows along `y`.
    pub pixels: Vec<f64>,
    pub source: u64,
}

impl Segment {
    /// Centre of the tile in volts.
    pub fn center(&self, cfg: &ChargeMapConfig) -> (f64, f64) {
        (
            self.origin.0 + cfg.segment_size / 2.0,
            self.origin.1 + cfg.segment_size / 2.0,
        )
    }
}

/// Tiles laid from the map origin; partial tiles at the far edges are dropped.
pub fn segment(map: &CurrentMap, cfg: &ChargeMapConfig) -> Vec<Segment> {
    let (tx, ty) = (cfg.tiles_in(map.span_x()), cfg.tiles_in(map.span_y()));
    let pitch = cfg.pixel_pitch();
    let n = cfg.pixel_size;
    let mut out = Vec::with_capacity(tx * ty);
    for j in 0..ty {
        for i in 0..tx {
            let ox = map.x[0] + i as f64 * cfg.segment_size;
            let oy = map.y[0] + j as f64 * cfg.segment_size;
            let mut pixels = Vec::with_capacity(n * n);
            for py in 0..n {
                let vy = oy + (py as f64 + 0.5) * pitch;
                for px in 0..n {
                    pixels.push(map.sample(ox + (px as f64 + 0.5) * pitch, vy));
                }
            }
            out.push(Segment {
                origin: (ox, oy),
                pixels,
                source: map.id,
            });
        }
    }
    out
}

/// Combines the two quality classifiers and the regime classifier into one
/// label per tile. Both qualities bad means no dot, exactly one good picks
/// that regime and two good defers to the regime classifier (true = double).
pub fn combine_assessment(single_good: bool, double_good: bool, regime_double: impl FnOnce() -> Result<bool>) -> Result<Regime> {
    Ok(match (single_good, double_good) {
        (false, false) => Regime::NoDot,
        (true, false) => Regime::SingleDot,
        (false, true) => Regime::DoubleDot,
        (true, true) => {
            if regime_double()? {
                Regime::DoubleDot
            } else {
                Regime::SingleDot
            }
        }
    })
}

pub fn assess_segments<C: BinaryClassifier + ?Sized>(
    segments: &[Segment],
    sd_model: &C,
    dd_model: &C,
    regime_model: &C,
) -> Result<Vec<Regime>> {
    segments
        .iter()
        .map(|s| {
            let sd = sd_model.predict(&s.pixels)?;
            let dd = dd_model.predict(&s.pixels)?;
            combine_assessment(sd, dd, || regime_model.predict(&s.pixels))
        })
        .collect()
}
