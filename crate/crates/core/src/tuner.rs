//! Second stage: the closed tuning loop that drives a characterized device
//! into a single- or double-dot regime.
//!
//! The loop sets the top barrier inside its valid range, places the central
//! barrier at a fixed fraction of the saturation current, places the outer
//! barriers inside their transition windows, narrows the plunger windows and
//! measures charge stability diagrams until a tile is classified as the
//! target regime.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::characterize::{characterize_gate, CharacterizationReport, CharacterizeConfig, GateReport, Verdict};
use crate::charge_map::{acquire_diagram, assess_segments, segment, ChargeMapConfig, CurrentMap, RangeAction, Segment, Termination};
use crate::device::{Device, Gate, GateMap, Regime, VoltageRange};
use crate::ml::BinaryClassifier;
use crate::pinchoff::{extract_voltages, smooth, DEFAULT_SMOOTHING};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    SingleDot,
    #[default]
    DoubleDot,
}

impl Target {
    pub fn regime(self) -> Regime {
        match self {
            Target::SingleDot => Regime::SingleDot,
            Target::DoubleDot => Regime::DoubleDot,
        }
    }

    /// The other dot regime, which calls for a central-barrier change.
    fn opposite(self) -> Regime {
        match self {
            Target::SingleDot => Regime::DoubleDot,
            Target::DoubleDot => Regime::SingleDot,
        }
    }

    /// Central-barrier direction that moves away from the opposite regime.
    fn cb_direction(self) -> Direction {
        match self {
            Target::SingleDot => Direction::TooLow,
            Target::DoubleDot => Direction::TooHigh,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TunerConfig {
    pub target: Target,
    /// Fraction of the top barrier's valid range below its upper end.
    pub tb_init_fraction: f64,
    /// Central-barrier current level in units of `A_max`.
    pub cb_level: f64,
    /// Position of the outer barriers inside their `[v_L, v_H]` windows.
    pub outer_fraction: f64,
    /// Smallest and largest voltage step of one gate update (V).
    pub delta_clamp: (f64, f64),
    pub outer_safety_margin: f64,
    pub cb_safety_margin: f64,
    /// Mean diagram current (units of `A_max`) below which a new top barrier
    /// is chosen more positive.
    pub low_signal: f64,
    /// Budget of 2D sweeps.
    pub max_2d: usize,
    pub extra_iterations_after_success: usize,
    /// Range adjustments allowed per diagram.
    pub max_adjust_iters: usize,
    /// Plunger windows narrower than this are widened about their centre (V).
    pub min_plunger_window: f64,
    pub sweep_resolution: f64,
    pub smoothing: f64,
    /// Gaussian width (samples) that washes Coulomb peaks out of plunger traces.
    pub plunger_smoothing: f64,
    pub charge_map: ChargeMapConfig,
}

impl Default for TunerConfig {
    fn default() -> Self {
        Self {
            target: Target::DoubleDot,
            tb_init_fraction: 0.25,
            cb_level: 0.75,
            outer_fraction: 1.0 / 3.0,
            delta_clamp: (0.05, 0.1),
            outer_safety_margin: 0.1,
            cb_safety_margin: 0.05,
            low_signal: 0.15,
            max_2d: 20,
            extra_iterations_after_success: 2,
            max_adjust_iters: 10,
            min_plunger_window: 0.1,
            sweep_resolution: 0.01,
            smoothing: DEFAULT_SMOOTHING,
            plunger_smoothing: 5.0,
            charge_map: ChargeMapConfig::default(),
        }
    }
}

impl TunerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_2d == 0 {
            return Err(Error::Config("max_2d must be at least 1".into()));
        }
        let (lo, hi) = self.delta_clamp;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("delta_clamp [{lo}, {hi}] is invalid")));
        }
        for (name, v) in [("tb_init_fraction", self.tb_init_fraction), ("outer_fraction", self.outer_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.cb_level > 0.0 && self.cb_level < 1.0) {
            return Err(Error::Config(format!("cb_level must lie in (0, 1), got {}", self.cb_level)));
        }
        if !(self.plunger_smoothing > 0.0) {
            return Err(Error::Config("plunger_smoothing must be positive".into()));
        }
        self.charge_map.validate()?;
        self.sweep_config().validate()
    }

    /// Upper bound on 1D sweeps: six per diagram iteration.
    pub fn max_1d(&self) -> usize {
        6 * self.max_2d
    }

    fn sweep_config(&self) -> CharacterizeConfig {
        CharacterizeConfig {
            sweep_resolution: self.sweep_resolution,
            smoothing: self.smoothing,
            ..CharacterizeConfig::default()
        }
    }
}

/// Whether the device carries too little or too much current.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    TooLow,
    TooHigh,
}

/// One gate update: half the distance to the relevant end of `range`, kept
/// between the configured step limits, applied away from the problem and
/// clamped to `range`.
pub fn voltage_delta(v: f64, range: VoltageRange, direction: Direction, cfg: &TunerConfig) -> f64 {
    let (lo, hi) = cfg.delta_clamp;
    let tilde = match direction {
        Direction::TooLow => 0.5 * (range.max - v),
        Direction::TooHigh => 0.5 * (v - range.min),
    };
    let delta = tilde.max(lo).min(hi);
    let new = match direction {
        Direction::TooLow => v + delta,
        Direction::TooHigh => v - delta,
    };
    range.clamp(new)
}

/// Initial top barrier inside its valid range.
pub fn choose_top_barrier(tb_valid_range: VoltageRange, cfg: &TunerConfig) -> f64 {
    tb_valid_range.max - cfg.tb_init_fraction * (tb_valid_range.max - tb_valid_range.min)
}

/// Voltage where the central-barrier trace reaches `cb_level · A_max`.
///
/// The fitted curve is inverted when the fit converged and the crossing lies
/// inside the sweep; otherwise the smoothed sample closest to the level
/// among the bracketing pairs nearest saturation is used.
pub fn central_barrier_voltage(report: &GateReport, cfg: &TunerConfig) -> Result<f64> {
    let fit = &report.fit;
    let level = cfg.cb_level;
    if !fit.degraded {
        if let Some(x) = fit.tanh().inverse(level) {
            if (0.0..=1.0).contains(&x) {
                return Ok(fit.to_volts(x));
            }
        }
    }
    let s = smooth(&report.trace, cfg.smoothing)?;
    for i in (1..s.len()).rev() {
        let (a, b) = (s.currents[i - 1] - level, s.currents[i] - level);
        if a == 0.0 || b == 0.0 || (a < 0.0) != (b < 0.0) {
            let j = if a.abs() <= b.abs() { i - 1 } else { i };
            return Ok(s.setpoints[j]);
        }
    }
    Err(Error::NoCrossing { level })
}

/// Sets the central barrier from its trace.
pub fn set_central_barrier(device: &mut Device, report: &GateReport, cfg: &TunerConfig) -> Result<f64> {
    let v = central_barrier_voltage(report, cfg)?;
    let v = device.safety()[Gate::CB].clamp(v);
    device.set_voltage(Gate::CB, v)?;
    Ok(v)
}

/// Outer-barrier voltage from its own `[v_L, v_H]` window, read off the
/// fitted curve since the second difference of a noisy trace is unreliable.
pub fn outer_barrier_voltage(report: &GateReport, cfg: &TunerConfig) -> Result<f64> {
    let f = &report.fit;
    if f.degraded {
        return Err(Error::InvalidArgument(format!("fit of {} did not converge", report.gate)));
    }
    let (v_l, v_h) = f.fitted_voltages().map_or((f.v_l, f.v_h), |t| (t.v_l, t.v_h));
    if v_h < v_l {
        return Err(Error::InvalidArgument(format!(
            "{} window is inverted: v_L = {v_l:.4}, v_H = {v_h:.4}",
            report.gate
        )));
    }
    Ok(v_l + cfg.outer_fraction * (v_h - v_l))
}

/// Characterizes each outer barrier with the other one at its upper limit and
/// sets both. Returns the two voltages and traces.
pub fn set_outer_barriers(
    device: &mut Device,
    cfg: &TunerConfig,
    model: &dyn BinaryClassifier,
) -> Result<((f64, f64), [GateReport; 2])> {
    let sweep = cfg.sweep_config();
    let mut reports = Vec::with_capacity(2);
    for (g, other) in [(Gate::LB, Gate::RB), (Gate::RB, Gate::LB)] {
        let keep = device.voltage(other);
        device.set_voltage(other, device.safety()[other].max)?;
        let r = characterize_gate(device, g, device.safety()[g], &sweep, model);
        device.set_voltage(other, keep)?;
        reports.push(r?);
    }
    let lb = outer_barrier_voltage(&reports[0], cfg)?;
    let rb = outer_barrier_voltage(&reports[1], cfg)?;
    let lb = device.safety()[Gate::LB].clamp(lb);
    let rb = device.safety()[Gate::RB].clamp(rb);
    device.set_voltage(Gate::LB, lb)?;
    device.set_voltage(Gate::RB, rb)?;
    let [l, r]: [GateReport; 2] = reports.try_into().expect("two reports");
    Ok(((lb, rb), [l, r]))
}

/// Labels the tiles of a diagram.
pub trait SegmentAssessor: Sync {
    fn assess(&self, device: &Device, segments: &[Segment], cfg: &ChargeMapConfig) -> Result<Vec<Regime>>;
}

/// The two quality classifiers and the regime classifier.
pub struct ClassifierTrio<'a> {
    pub single: &'a dyn BinaryClassifier,
    pub double: &'a dyn BinaryClassifier,
    pub regime: &'a dyn BinaryClassifier,
}

impl SegmentAssessor for ClassifierTrio<'_> {
    fn assess(&self, _device: &Device, segments: &[Segment], _cfg: &ChargeMapConfig) -> Result<Vec<Regime>> {
        assess_segments(segments, self.single, self.double, self.regime)
    }
}

/// Ground truth at each tile centre, for simulation-backed checks.
pub struct OracleAssessor;

impl SegmentAssessor for OracleAssessor {
    fn assess(&self, device: &Device, segments: &[Segment], cfg: &ChargeMapConfig) -> Result<Vec<Regime>> {
        Ok(segments.iter().map(|s| oracle_at_tile(device, s, cfg)).collect())
    }
}

fn oracle_at_tile(device: &Device, s: &Segment, cfg: &ChargeMapConfig) -> Regime {
    let (x, y) = s.center(cfg);
    let mut v = device.voltages();
    v.lp = x;
    v.rp = y;
    device.physics().oracle_regime(&v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    Init,
    SetTB,
    CharCB,
    CharOuter,
    CharPlungers,
    ChargeDiagram,
    Classify,
    Done,
    Failed,
}

/// Every legal stage change of the tuning loop.
pub const TRANSITIONS: &[(Stage, Stage)] = &[
    (Stage::Init, Stage::SetTB),
    (Stage::Init, Stage::Failed),
    (Stage::SetTB, Stage::CharCB),
    (Stage::SetTB, Stage::Failed),
    (Stage::CharCB, Stage::CharOuter),
    (Stage::CharCB, Stage::SetTB),
    (Stage::CharCB, Stage::Failed),
    (Stage::CharOuter, Stage::CharPlungers),
    (Stage::CharOuter, Stage::SetTB),
    (Stage::CharOuter, Stage::Failed),
    (Stage::CharPlungers, Stage::ChargeDiagram),
    (Stage::CharPlungers, Stage::CharOuter),
    (Stage::CharPlungers, Stage::Failed),
    (Stage::ChargeDiagram, Stage::Classify),
    (Stage::ChargeDiagram, Stage::CharOuter),
    (Stage::ChargeDiagram, Stage::Done),
    (Stage::ChargeDiagram, Stage::Failed),
    (Stage::Classify, Stage::Done),
    (Stage::Classify, Stage::CharPlungers),
    (Stage::Classify, Stage::SetTB),
    (Stage::Classify, Stage::Failed),
    // The measurement budget can end a run that already found its target.
    (Stage::SetTB, Stage::Done),
    (Stage::CharCB, Stage::Done),
    (Stage::CharOuter, Stage::Done),
    (Stage::CharPlungers, Stage::Done),
];

pub fn is_legal_transition(from: Stage, to: Stage) -> bool {
    TRANSITIONS.contains(&(from, to))
}

/// Counts of tile labels in one diagram.
pub type RegimeCounts = BTreeMap<Regime, usize>;

fn count(labels: &[Regime]) -> RegimeCounts {
    let mut c = RegimeCounts::new();
    for r in [Regime::NoDot, Regime::SingleDot, Regime::DoubleDot] {
        c.insert(r, labels.iter().filter(|&&l| l == r).count());
    }
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Initialized { a_max: f64 },
    TopBarrierSet { tb: f64 },
    CentralBarrierSet { cb: f64 },
    OuterBarriersSet { lb: f64, rb: f64 },
    OuterBarrierAdjusted { gate: Gate, direction: Direction, from: f64, to: f64 },
    PlungerWindows { lp: (f64, f64), rp: (f64, f64) },
    Diagram { map_id: u64, termination: Termination, lp: (f64, f64), rp: (f64, f64), mean: f64, sweeps: usize },
    Classified { classifier: RegimeCounts, oracle: RegimeCounts },
    TargetFound { tiles: usize },
    CentralBarrierChanged { direction: Direction, from: f64, to: f64 },
    TopBarrierChanged { direction: Direction, from: f64, to: f64, reason: String },
    StepFailed { reason: String },
    Finished { success: bool, reason: String },
}

/// One entry of the action log. `step` orders the entries of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub stage: Stage,
    pub next: Stage,
    #[serde(flatten)]
    pub event: Event,
    pub voltages: GateMap<f64>,
    pub n_1d: usize,
    pub n_2d: usize,
}

/// The best diagram seen, with per-tile labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagramSummary {
    pub map_id: u64,
    pub lp: (f64, f64),
    pub rp: (f64, f64),
    pub voltages: GateMap<f64>,
    pub target_tiles: usize,
    pub tile_origins: Vec<(f64, f64)>,
    pub classifier: Vec<Regime>,
    pub oracle: Vec<Regime>,
    #[serde(skip)]
    pub map: Option<CurrentMap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningResult {
    pub target: Target,
    pub success: bool,
    pub reason: String,
    /// Oracle label at the final voltages.
    pub oracle_regime: Option<Regime>,
    /// Classifier label of the tile the final plunger voltages sit in.
    pub classifier_regime: Option<Regime>,
    pub n_1d: usize,
    pub n_2d: usize,
    pub final_voltages: GateMap<f64>,
    pub best: Option<DiagramSummary>,
    pub stages: Vec<Stage>,
    pub log: Vec<LogEntry>,
}

impl TuningResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// True iff every consecutive stage pair is in the transition table.
    pub fn transitions_are_legal(&self) -> bool {
        self.stages.windows(2).all(|w| is_legal_transition(w[0], w[1]))
    }
}

/// Live position of the tuning loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunerState {
    pub stage: Stage,
    pub voltages: GateMap<f64>,
    pub valid_ranges: GateMap<Option<VoltageRange>>,
    pub history: Vec<LogEntry>,
}

struct Machine<'a> {
    device: &'a mut Device,
    cfg: &'a TunerConfig,
    pinch: &'a dyn BinaryClassifier,
    assessor: &'a dyn SegmentAssessor,
    state: TunerState,
    stages: Vec<Stage>,
    start_1d: usize,
    start_2d: usize,
    a_max: f64,
    tb: f64,
    tb_range: VoltageRange,
    windows: Option<((f64, f64), (f64, f64))>,
    pending_outer: Vec<(Gate, Direction)>,
    acquisition: Option<crate::charge_map::Acquisition>,
    found: bool,
    extra_done: usize,
    best: Option<DiagramSummary>,
}

enum Outcome {
    Next(Stage),
    Stop { success: bool, reason: String },
}

impl Machine<'_> {
    fn used_1d(&self) -> usize {
        self.device.n_1d() - self.start_1d
    }

    fn used_2d(&self) -> usize {
        self.device.n_2d() - self.start_2d
    }

    fn log(&mut self, next: Stage, event: Event) {
        let entry = LogEntry {
            step: self.state.history.len(),
            stage: self.state.stage,
            next,
            event,
            voltages: self.device.voltages(),
            n_1d: self.used_1d(),
            n_2d: self.used_2d(),
        };
        self.state.history.push(entry);
    }

    fn budget_left(&self) -> bool {
        self.used_2d() < self.cfg.max_2d && self.used_1d() + 5 <= self.cfg.max_1d()
    }

    fn out_of_budget(&self) -> Outcome {
        if self.best.is_some() {
            Outcome::Stop {
                success: true,
                reason: "measurement budget used after reaching the target".into(),
            }
        } else {
            Outcome::Stop {
                success: false,
                reason: format!(
                    "measurement budget exhausted ({} 2D, {} 1D sweeps)",
                    self.used_2d(),
                    self.used_1d()
                ),
            }
        }
    }

    /// New top barrier one delta step away, then back to the start of the
    /// barrier sequence.
    fn change_tb(&mut self, direction: Direction, reason: String) -> Result<Outcome> {
        let from = self.tb;
        self.tb = voltage_delta(self.tb, self.tb_range, direction, self.cfg);
        self.log(
            Stage::SetTB,
            Event::TopBarrierChanged {
                direction,
                from,
                to: self.tb,
                reason,
            },
        );
        Ok(Outcome::Next(Stage::SetTB))
    }

    fn step(&mut self) -> Result<Outcome> {
        let stage = self.state.stage;
        if !matches!(stage, Stage::Init | Stage::Classify) && !self.budget_left() {
            return Ok(self.out_of_budget());
        }
        match stage {
            Stage::Init => {
                self.a_max = self.device.measure_a_max_safe_max()?;
                self.tb = choose_top_barrier(self.tb_range, self.cfg);
                self.log(Stage::SetTB, Event::Initialized { a_max: self.a_max });
                Ok(Outcome::Next(Stage::SetTB))
            }
            Stage::SetTB => {
                self.device.set_all_to_max();
                self.tb = self.device.safety()[Gate::TB].clamp(self.tb);
                self.device.set_voltage(Gate::TB, self.tb)?;
                self.log(Stage::CharCB, Event::TopBarrierSet { tb: self.tb });
                Ok(Outcome::Next(Stage::CharCB))
            }
            Stage::CharCB => {
                let sweep = self.cfg.sweep_config();
                let range = self.device.safety()[Gate::CB];
                let report = characterize_gate(self.device, Gate::CB, range, &sweep, self.pinch)?;
                self.state.valid_ranges.cb = Some(VoltageRange::new(report.fit.v_l, report.fit.v_h));
                match set_central_barrier(self.device, &report, self.cfg) {
                    Ok(cb) => {
                        self.log(Stage::CharOuter, Event::CentralBarrierSet { cb });
                        Ok(Outcome::Next(Stage::CharOuter))
                    }
                    Err(e) => self.change_tb(Direction::TooHigh, format!("central barrier: {e}")),
                }
            }
            Stage::CharOuter => self.outer(),
            Stage::CharPlungers => self.plungers(),
            Stage::ChargeDiagram => self.diagram(),
            Stage::Classify => self.classify(),
            Stage::Done | Stage::Failed => unreachable!("terminal stage"),
        }
    }

    fn outer(&mut self) -> Result<Outcome> {
        let safety = *self.device.safety();
        if self.pending_outer.is_empty() {
            match set_outer_barriers(self.device, self.cfg, self.pinch) {
                Ok(((lb, rb), [l, r])) => {
                    self.state.valid_ranges.lb = Some(VoltageRange::new(l.fit.v_l, l.fit.v_h));
                    self.state.valid_ranges.rb = Some(VoltageRange::new(r.fit.v_l, r.fit.v_h));
                    self.log(Stage::CharPlungers, Event::OuterBarriersSet { lb, rb });
                }
                Err(e) => {
                    self.log(Stage::SetTB, Event::StepFailed { reason: format!("outer barriers: {e}") });
                    return self.change_tb(Direction::TooHigh, "outer barriers could not be set".into());
                }
            }
        } else {
            for (g, direction) in std::mem::take(&mut self.pending_outer) {
                let from = self.device.voltage(g);
                let to = voltage_delta(from, safety[g], direction, self.cfg);
                self.device.set_voltage(g, to)?;
                self.log(
                    Stage::CharPlungers,
                    Event::OuterBarrierAdjusted {
                        gate: g,
                        direction,
                        from,
                        to,
                    },
                );
            }
        }
        for g in [Gate::LB, Gate::RB] {
            let v = self.device.voltage(g);
            let r = safety[g];
            let near_min = v - r.min < self.cfg.outer_safety_margin;
            let near_max = r.max - v < self.cfg.outer_safety_margin;
            if near_min || near_max {
                // A barrier at its lower limit means the top barrier depletes
                // too little, so it goes more negative.
                let direction = if near_min { Direction::TooHigh } else { Direction::TooLow };
                return self.change_tb(direction, format!("{g} within {} V of its safety limit", self.cfg.outer_safety_margin));
            }
        }
        Ok(Outcome::Next(Stage::CharPlungers))
    }

    fn plungers(&mut self) -> Result<Outcome> {
        let sweep = self.cfg.sweep_config();
        let safety = *self.device.safety();
        let mut windows = Vec::with_capacity(2);
        let mut failed = Vec::new();
        for (g, other, barrier) in [(Gate::LP, Gate::RP, Gate::LB), (Gate::RP, Gate::LP, Gate::RB)] {
            let keep = self.device.voltage(other);
            self.device.set_voltage(other, safety[other].max)?;
            let r = characterize_gate(self.device, g, safety[g], &sweep, self.pinch);
            self.device.set_voltage(other, keep)?;
            let r = r?;
            let peak = r.trace.currents.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if r.fit.degraded || peak < self.cfg.charge_map.current_window.0 {
                failed.push((barrier, Direction::TooLow));
            }
            // Coulomb peaks dominate the variance of a lightly smoothed trace.
            let env = extract_voltages(&smooth(&r.trace, self.cfg.plunger_smoothing)?)?;
            let hi = env.v_h.min(2.0 * env.v_t - env.v_l);
            let w = widen(env.v_l, hi, self.cfg.min_plunger_window, safety[g]);
            self.state.valid_ranges[g] = Some(VoltageRange::new(w.0, w.1));
            windows.push(w);
        }
        if !failed.is_empty() {
            self.log(Stage::CharOuter, Event::StepFailed { reason: "plunger traces carry no usable current".into() });
            self.pending_outer = failed;
            return Ok(Outcome::Next(Stage::CharOuter));
        }
        let (lp, rp) = (windows[0], windows[1]);
        // Plungers rest at the top of their windows between measurements.
        self.device.set_voltage(Gate::LP, lp.1)?;
        self.device.set_voltage(Gate::RP, rp.1)?;
        self.windows = Some((lp, rp));
        self.log(Stage::ChargeDiagram, Event::PlungerWindows { lp, rp });
        Ok(Outcome::Next(Stage::ChargeDiagram))
    }

    fn diagram(&mut self) -> Result<Outcome> {
        let (lp, rp) = self.windows.expect("plunger windows are set before a diagram");
        let left = self.cfg.max_2d - self.used_2d();
        let iters = self.cfg.max_adjust_iters.min(left - 1);
        let before = self.used_2d();
        let acq = acquire_diagram(self.device, lp, rp, &self.cfg.charge_map, iters)?;
        let last = *acq.history.last().expect("at least one map");
        let event = Event::Diagram {
            map_id: acq.map.id,
            termination: acq.termination,
            lp: acq.lp,
            rp: acq.rp,
            mean: acq.map.mean(),
            sweeps: self.used_2d() - before,
        };
        self.windows = Some((acq.lp, acq.rp));
        let outcome = match acq.termination {
            Termination::InWindow => Outcome::Next(Stage::Classify),
            Termination::SafetyLimit | Termination::MaxIterations => {
                let mut adjust = Vec::new();
                for (action, barrier) in [(last.lp_action, Gate::LB), (last.rp_action, Gate::RB)] {
                    match action {
                        RangeAction::Increase => adjust.push((barrier, Direction::TooLow)),
                        RangeAction::Decrease => adjust.push((barrier, Direction::TooHigh)),
                        RangeAction::Keep => {}
                    }
                }
                if adjust.is_empty() {
                    Outcome::Next(Stage::Classify)
                } else if self.used_2d() >= self.cfg.max_2d {
                    let end = if self.best.is_some() { Stage::Done } else { Stage::Failed };
                    self.log(end, event);
                    self.acquisition = Some(acq);
                    return Ok(self.out_of_budget());
                } else {
                    self.pending_outer = adjust;
                    Outcome::Next(Stage::CharOuter)
                }
            }
        };
        let next = match &outcome {
            Outcome::Next(s) => *s,
            Outcome::Stop { .. } => Stage::Done,
        };
        self.log(next, event);
        self.acquisition = Some(acq);
        Ok(outcome)
    }

    fn classify(&mut self) -> Result<Outcome> {
        let acq = self.acquisition.take().expect("a diagram precedes classification");
        let cm = &self.cfg.charge_map;
        let segments = segment(&acq.pixels, cm);
        let mut v = self.device.voltages();
        let labels = self.assessor.assess(self.device, &segments, cm)?;
        let oracle = OracleAssessor.assess(self.device, &segments, cm)?;
        let target = self.cfg.target;
        let hits = labels.iter().filter(|&&l| l == target.regime()).count();
        let opposite = labels.iter().any(|&l| l == target.opposite());
        let mean = acq.map.mean();

        if hits > 0 && self.best.as_ref().map_or(true, |b| hits > b.target_tiles) {
            v.lp = acq.lp.1;
            v.rp = acq.rp.1;
            self.best = Some(DiagramSummary {
                map_id: acq.map.id,
                lp: acq.lp,
                rp: acq.rp,
                voltages: v,
                target_tiles: hits,
                tile_origins: segments.iter().map(|s| s.origin).collect(),
                classifier: labels.clone(),
                oracle: oracle.clone(),
                map: Some(acq.map.clone()),
            });
        }

        let counts = Event::Classified {
            classifier: count(&labels),
            oracle: count(&oracle),
        };

        if hits > 0 && !self.found {
            self.found = true;
            self.log(Stage::Classify, Event::TargetFound { tiles: hits });
        } else if self.found {
            self.extra_done += 1;
        }
        if self.found {
            let more = self.extra_done < self.cfg.extra_iterations_after_success
                && self.used_2d() < self.cfg.max_2d
                && self.used_1d() + 5 <= self.cfg.max_1d();
            let changed = more && self.step_cb(target.cb_direction())?.is_some();
            if !changed {
                self.log(Stage::Done, counts);
                let tiles = self.best.as_ref().map_or(0, |b| b.target_tiles);
                return Ok(Outcome::Stop {
                    success: true,
                    reason: format!("{tiles} tiles classified as {:?}", target.regime()),
                });
            }
            self.log(Stage::CharPlungers, counts);
            return Ok(Outcome::Next(Stage::CharPlungers));
        }

        if !self.budget_left() {
            self.log(Stage::Failed, counts);
            return Ok(self.out_of_budget());
        }

        if opposite {
            let from = self.device.voltage(Gate::CB);
            if let Some(to) = self.step_cb(target.cb_direction())? {
                self.log(Stage::CharPlungers, counts);
                self.log(
                    Stage::CharPlungers,
                    Event::CentralBarrierChanged {
                        direction: target.cb_direction(),
                        from,
                        to,
                    },
                );
                return Ok(Outcome::Next(Stage::CharPlungers));
            }
            let r = self.device.safety()[Gate::CB];
            let m = self.cfg.cb_safety_margin;
            let proposed = voltage_delta(from, r, target.cb_direction(), self.cfg);
            let direction = if proposed - r.min < m { Direction::TooHigh } else { Direction::TooLow };
            self.log(Stage::SetTB, counts);
            return self.change_tb(direction, format!("central barrier within {m} V of its safety limit"));
        }

        self.log(Stage::SetTB, counts);
        let direction = if mean < self.cfg.low_signal {
            Direction::TooLow
        } else {
            Direction::TooHigh
        };
        self.change_tb(direction, format!("no good dot; mean current {mean:.4} A_max"))
    }

    /// Moves the central barrier one delta step unless the new value would
    /// sit within the margin of its safety range.
    fn step_cb(&mut self, direction: Direction) -> Result<Option<f64>> {
        let from = self.device.voltage(Gate::CB);
        let r = self.device.safety()[Gate::CB];
        let to = voltage_delta(from, r, direction, self.cfg);
        let m = self.cfg.cb_safety_margin;
        if to - r.min < m || r.max - to < m {
            return Ok(None);
        }
        self.device.set_voltage(Gate::CB, to)?;
        Ok(Some(to))
    }
}

/// Widens `[lo, hi]` about its centre to at least `min_width` and moves it
/// inside `limits`.
fn widen(lo: f64, hi: f64, min_width: f64, limits: VoltageRange) -> (f64, f64) {
    let (mut a, mut b) = if hi - lo < min_width {
        let c = 0.5 * (lo + hi);
        (c - 0.5 * min_width, c + 0.5 * min_width)
    } else {
        (lo, hi)
    };
    if a < limits.min {
        b += limits.min - a;
        a = limits.min;
    }
    if b > limits.max {
        a -= b - limits.max;
        b = limits.max;
    }
    (a.max(limits.min), b)
}

/// Runs the tuning loop on a characterized device.
///
/// Devices without a working verdict or a top-barrier valid range fail
/// immediately without any measurement.
pub fn run_tuning(
    device: &mut Device,
    report: &CharacterizationReport,
    cfg: &TunerConfig,
    pinch: &dyn BinaryClassifier,
    assessor: &dyn SegmentAssessor,
) -> Result<TuningResult> {
    cfg.validate()?;
    let valid_ranges = GateMap::splat(None);
    let Some(tb_range) = report.tb_valid_range.filter(|_| report.verdict == Verdict::Working) else {
        return Ok(TuningResult {
            target: cfg.target,
            success: false,
            reason: format!("device verdict is {}", report.verdict.label()),
            oracle_regime: None,
            classifier_regime: None,
            n_1d: 0,
            n_2d: 0,
            final_voltages: device.voltages(),
            best: None,
            stages: vec![Stage::Init, Stage::Failed],
            log: Vec::new(),
        });
    };

    let mut m = Machine {
        start_1d: device.n_1d(),
        start_2d: device.n_2d(),
        state: TunerState {
            stage: Stage::Init,
            voltages: device.voltages(),
            valid_ranges: GateMap {
                tb: Some(tb_range),
                ..valid_ranges
            },
            history: Vec::new(),
        },
        device,
        cfg,
        pinch,
        assessor,
        stages: vec![Stage::Init],
        a_max: 0.0,
        tb: tb_range.max,
        tb_range,
        windows: None,
        pending_outer: Vec::new(),
        acquisition: None,
        found: false,
        extra_done: 0,
        best: None,
    };

    let (success, reason) = loop {
        match m.step()? {
            Outcome::Next(s) => {
                m.state.stage = s;
                m.stages.push(s);
            }
            Outcome::Stop { success, reason } => {
                let last = if success { Stage::Done } else { Stage::Failed };
                m.log(last, Event::Finished { success, reason: reason.clone() });
                m.stages.push(last);
                m.state.stage = last;
                break (success, reason);
            }
        }
    };

    let cm = &cfg.charge_map;
    let mut classifier_regime = None;
    if let Some(best) = &m.best {
        let i = best
            .classifier
            .iter()
            .position(|&l| l == cfg.target.regime())
            .expect("best diagram has a target tile");
        let (ox, oy) = best.tile_origins[i];
        let mut v = best.voltages;
        v.lp = ox + 0.5 * cm.segment_size;
        v.rp = oy + 0.5 * cm.segment_size;
        m.device.set_voltages(&v)?;
        classifier_regime = Some(best.classifier[i]);
    }
    let oracle_regime = m.best.as_ref().map(|_| m.device.oracle_regime());
    Ok(TuningResult {
        target: cfg.target,
        success,
        reason,
        oracle_regime,
        classifier_regime,
        n_1d: m.used_1d(),
        n_2d: m.used_2d(),
        final_voltages: m.device.voltages(),
        best: m.best,
        stages: m.stages,
        log: m.state.history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::characterize::tests::RuleClassifier;
    use crate::characterize::run_characterization;
    use crate::device::{new_random_device, new_symmetric_device, FaultFlags};

    fn cfg() -> TunerConfig {
        TunerConfig::default()
    }

    #[test]
    fn voltage_delta_worked_examples() {
        let r = VoltageRange::new(-2.0, 0.0);
        assert_eq!(voltage_delta(-1.0, r, Direction::TooLow, &cfg()), -0.9);
        assert_eq!(voltage_delta(-0.1, r, Direction::TooHigh, &cfg()), -0.2);
        assert_eq!(voltage_delta(-0.04, r, Direction::TooLow, &cfg()), 0.0);
    }

    #[test]
    fn top_barrier_formula() {
        let c = cfg();
        assert_eq!(choose_top_barrier(VoltageRange::new(-2.0, -1.0), &c), -1.25);
        assert_eq!(choose_top_barrier(VoltageRange::new(-1.0, -1.0), &c), -1.0);
        assert_eq!(choose_top_barrier(VoltageRange::new(-3.0, -1.0), &c), -1.5);
    }

    fn report_from(a: f64, b: f64, c: f64, v_l: f64, v_h: f64) -> GateReport {
        let n = 101;
        let setpoints: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let currents = setpoints.iter().map(|x| a * (1.0 + (b * x + c).tanh())).collect();
        let trace = crate::pinchoff::Trace {
            gate: Gate::CB,
            setpoints,
            currents,
            v_min: 0.0,
            v_max: 1.0,
        };
        let fit = crate::pinchoff::PinchoffFit {
            a,
            b,
            c,
            residual_norm: 0.0,
            degraded: false,
            v_l,
            v_t: 0.5 * (v_l + v_h),
            v_h,
            a_l: 0.0,
            a_h: 2.0 * a,
            v_min: 0.0,
            v_max: 1.0,
        };
        GateReport {
            gate: Gate::CB,
            features: crate::pinchoff::features(&fit),
            trace,
            fit,
            good: true,
        }
    }

    #[test]
    fn central_barrier_inverts_the_fit() {
        let r = report_from(0.5, 8.0, -4.0, 0.3, 0.7);
        let x = central_barrier_voltage(&r, &cfg()).unwrap();
        assert!((x - (0.5f64.atanh() + 4.0) / 8.0).abs() < 1e-12);
        let sat = TunerConfig { cb_level: 0.999_999_9, ..cfg() };
        assert!(central_barrier_voltage(&report_from(0.4, 8.0, -4.0, 0.3, 0.7), &sat).is_err());
    }

    #[test]
    fn outer_barrier_formula() {
        let c = cfg();
        let v = outer_barrier_voltage(&report_from(0.5, 8.0, -4.0, 0.1, 0.9), &c).unwrap();
        let (v_l, v_h) = (3.0 / 8.0, ((1.0 / 3f64.sqrt()).atanh() + 4.0) / 8.0);
        assert!((v - (v_l + (v_h - v_l) / 3.0)).abs() < 1e-12);
        // A falling fit leaves the sample-based window in charge.
        let v = outer_barrier_voltage(&report_from(0.5, -8.0, 4.0, 0.3, 0.9), &c).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
        assert!(outer_barrier_voltage(&report_from(0.5, -8.0, 4.0, 0.9, 0.3), &c).is_err());
    }

    #[test]
    fn widened_windows_stay_legal() {
        let lim = VoltageRange::new(-2.0, 0.0);
        assert_eq!(widen(-1.0, -0.5, 0.1, lim), (-1.0, -0.5));
        let (a, b) = widen(-1.0, -0.98, 0.1, lim);
        assert!((b - a - 0.1).abs() < 1e-12);
        let (a, b) = widen(-0.01, 0.0, 0.1, lim);
        assert!(b <= 0.0 && (b - a - 0.1).abs() < 1e-12);
    }

    #[test]
    fn transition_table_is_closed() {
        for &(a, b) in TRANSITIONS {
            assert!(!matches!(a, Stage::Done | Stage::Failed));
            assert_ne!(a, b);
        }
    }

    #[test]
    fn broken_report_fails_without_measuring() {
        let mut d = Device::new(new_random_device(2, Some(FaultFlags::unresponsive(Gate::TB))), 0);
        let r = run_characterization(&mut d, &CharacterizeConfig::default(), &RuleClassifier).unwrap();
        let (n1, n2) = (d.n_1d(), d.n_2d());
        let t = run_tuning(&mut d, &r, &cfg(), &RuleClassifier, &OracleAssessor).unwrap();
        assert!(!t.success);
        assert_eq!((d.n_1d(), d.n_2d()), (n1, n2));
        assert_eq!(t.stages, vec![Stage::Init, Stage::Failed]);
    }

    fn tuned(seed: u64, target: Target) -> TuningResult {
        let mut d = Device::new(new_random_device(seed, None), seed);
        let r = run_characterization(&mut d, &CharacterizeConfig::default(), &RuleClassifier).unwrap();
        let c = TunerConfig { target, ..cfg() };
        run_tuning(&mut d, &r, &c, &RuleClassifier, &OracleAssessor).unwrap()
    }

    #[test]
    fn oracle_guided_double_dot() {
        let t = tuned(1, Target::DoubleDot);
        assert!(t.success, "{}", t.reason);
        assert_eq!(t.oracle_regime, Some(Regime::DoubleDot));
        assert!(t.n_2d <= 10);
        assert!(t.transitions_are_legal());
    }

    #[test]
    fn single_dot_sits_at_a_higher_central_barrier() {
        let dd = tuned(2, Target::DoubleDot);
        let sd = tuned(2, Target::SingleDot);
        assert!(dd.success && sd.success, "{} / {}", dd.reason, sd.reason);
        assert_eq!(sd.oracle_regime, Some(Regime::SingleDot));
        assert!(sd.final_voltages.cb > dd.final_voltages.cb);
    }

    #[test]
    fn symmetric_device_sets_matching_outer_barriers() {
        let mut d = Device::new(new_symmetric_device(3), 0).noiseless();
        d.measure_a_max_safe_max().unwrap();
        d.set_voltage(Gate::TB, -1.2).unwrap();
        let ((lb, rb), _) = set_outer_barriers(&mut d, &cfg(), &RuleClassifier).unwrap();
        assert!((lb - rb).abs() < 0.05, "{lb} {rb}");
    }

    #[test]
    fn central_barrier_hits_its_level_on_a_noisy_device() {
        let mut d = Device::new(new_random_device(4, None), 9);
        let a_max = d.measure_a_max_safe_max().unwrap();
        d.set_voltage(Gate::TB, -1.2).unwrap();
        let sweep = cfg().sweep_config();
        let range = d.safety()[Gate::CB];
        let r = characterize_gate(&mut d, Gate::CB, range, &sweep, &RuleClassifier).unwrap();
        set_central_barrier(&mut d, &r, &cfg()).unwrap();
        let i = d.measure().unwrap();
        assert!((i - 0.75 * a_max).abs() < 0.05, "{i}");
    }
}
