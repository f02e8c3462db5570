//! First stage of the workflow: initial quality assessment, individual gate
//! characterization and the top barrier's valid range.

use serde::{Deserialize, Serialize};

use crate::device::{Device, Gate, GateMap, VoltageRange};
use crate::ml::BinaryClassifier;
use crate::pinchoff::{analyze, features, FeatureVector, PinchoffFit, Trace, DEFAULT_SMOOTHING};
use crate::{Error, Result};

/// Where the gates sit while the initial saturation current is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IqaMode {
    AllZero,
    #[default]
    AllSafeMax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CharacterizeConfig {
    pub iqa_mode: IqaMode,
    /// Fraction of `A_max` the device must carry with the top barrier set.
    pub signal_threshold: f64,
    /// Top-barrier increment while searching for signal (V).
    pub tb_step: f64,
    /// Shift applied to every safety range once the top barrier was raised (V).
    pub safety_shift: f64,
    /// Top-barrier decrement during the valid-range scan (V).
    pub tb_scan_step: f64,
    /// Setpoint spacing of gate sweeps (V).
    pub sweep_resolution: f64,
    /// Gaussian smoothing width in samples.
    pub smoothing: f64,
}

impl Default for CharacterizeConfig {
    fn default() -> Self {
        Self {
            iqa_mode: IqaMode::AllSafeMax,
            signal_threshold: 0.8,
            tb_step: 0.2,
            safety_shift: 0.5,
            tb_scan_step: 0.2,
            sweep_resolution: 0.01,
            smoothing: DEFAULT_SMOOTHING,
        }
    }
}

impl CharacterizeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.signal_threshold > 0.0 && self.signal_threshold < 1.0) {
            return Err(Error::Config(format!(
                "signal_threshold must lie in (0, 1), got {}",
                self.signal_threshold
            )));
        }
        for (name, v) in [
            ("tb_step", self.tb_step),
            ("tb_scan_step", self.tb_scan_step),
            ("sweep_resolution", self.sweep_resolution),
            ("smoothing", self.smoothing),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.safety_shift.is_finite() {
            return Err(Error::Config("safety_shift must be finite".into()));
        }
        Ok(())
    }

    /// Number of setpoints for a sweep over `range`.
    pub fn sweep_points(&self, range: VoltageRange) -> usize {
        ((range.span() / self.sweep_resolution - 1e-9).ceil() as usize + 1).max(crate::pinchoff::MIN_TRACE_LEN)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum IqaOutcome {
    Pass { a_max: f64 },
    Fail { current: f64 },
}

impl IqaOutcome {
    pub fn passed(&self) -> bool {
        matches!(self, IqaOutcome::Pass { .. })
    }
}

/// Measures the saturation current and passes the device iff it is above the
/// noise floor. On a pass the value becomes the device's `A_max`.
pub fn initial_quality_assessment(device: &mut Device, cfg: &CharacterizeConfig) -> Result<IqaOutcome> {
    let current = match cfg.iqa_mode {
        IqaMode::AllZero => device.measure_a_max_all_zero()?,
        IqaMode::AllSafeMax => device.measure_a_max_safe_max()?,
    };
    if current > device.noise_floor() {
        Ok(IqaOutcome::Pass { a_max: current })
    } else {
        device.clear_a_max();
        Ok(IqaOutcome::Fail { current })
    }
}

/// One swept gate with its analysis and quality label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub gate: Gate,
    pub trace: Trace,
    pub fit: PinchoffFit,
    pub features: FeatureVector,
    pub good: bool,
}

impl GateReport {
    /// Good label and a cut-off current below the noise floor.
    pub fn pinches(&self, noise_floor: f64, a_max: f64) -> bool {
        self.good && self.fit.a_l * a_max < noise_floor
    }
}

/// Sweeps `gate` from the top of `range` to its bottom with every other gate
/// left where it is, then fits and classifies the trace.
pub fn characterize_gate(
    device: &mut Device,
    gate: Gate,
    range: VoltageRange,
    cfg: &CharacterizeConfig,
    model: &dyn BinaryClassifier,
) -> Result<GateReport> {
    let a_max = device
        .a_max()
        .ok_or_else(|| Error::InvalidArgument("A_max has not been measured".into()))?;
    let raw = device.sweep_1d(gate, range.max, range.min, cfg.sweep_points(range))?;
    let trace = Trace::from_raw(&raw, a_max)?;
    let fit = analyze(&trace, cfg.smoothing)?;
    let features = features(&fit);
    let good = model.predict(features.as_slice())?;
    Ok(GateReport {
        gate,
        trace,
        fit,
        features,
        good,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    FailedIqa,
    Broken { gates: Vec<Gate>, reason: String },
    Working,
}

impl Verdict {
    pub fn label(&self) -> &'static str {
        match self {
            Verdict::FailedIqa => "failed_iqa",
            Verdict::Broken { .. } => "broken",
            Verdict::Working => "working",
        }
    }
}

/// One iteration of the top-barrier scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TbScanStep {
    pub tb: f64,
    /// Barriers swept at this setting and whether each pinched.
    pub swept: Vec<(Gate, bool)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TbRangeReport {
    pub steps: Vec<TbScanStep>,
    /// Barrier that pinched last and was lowered for the top-barrier sweep.
    pub last_barrier: Option<Gate>,
    pub tb_trace: Option<GateReport>,
    pub range: Option<VoltageRange>,
    /// Reason the range could not be established.
    pub failure: Option<String>,
    pub n_1d: usize,
}

/// Scans the top barrier from 0 V downwards, sweeping the barriers that have
/// not pinched yet, until all three do. The top barrier is then swept with the
/// last barrier at its lower limit and the cut-off of that trace closes the
/// range.
pub fn establish_tb_valid_range(
    device: &mut Device,
    cfg: &CharacterizeConfig,
    model: &dyn BinaryClassifier,
) -> Result<TbRangeReport> {
    let start = device.n_1d();
    let a_max = device
        .a_max()
        .ok_or_else(|| Error::InvalidArgument("A_max has not been measured".into()))?;
    let noise_floor = device.noise_floor();
    let tb_range = device.safety()[Gate::TB];
    let mut pending: Vec<Gate> = Gate::BARRIERS.to_vec();
    let mut steps = Vec::new();
    let mut found: Option<(f64, Gate)> = None;

    let mut k = 0usize;
    loop {
        let tb = tb_range.clamp(0.0) - k as f64 * cfg.tb_scan_step;
        if tb < tb_range.min - 1e-9 {
            break;
        }
        device.set_all_to_max();
        device.set_voltage(Gate::TB, tb)?;
        let mut swept = Vec::with_capacity(pending.len());
        let mut pinched_now: Vec<(Gate, f64)> = Vec::new();
        for &g in &pending {
            let r = characterize_gate(device, g, device.safety()[g], cfg, model)?;
            let ok = r.pinches(noise_floor, a_max);
            if ok {
                pinched_now.push((g, r.fit.v_t));
            }
            swept.push((g, ok));
        }
        pending.retain(|g| !pinched_now.iter().any(|(p, _)| p == g));
        steps.push(TbScanStep { tb, swept });
        if pending.is_empty() {
            // Several barriers may finish together; the one pinching closest to
            // its lower limit is the hardest to deplete.
            let last = pinched_now
                .iter()
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|p| p.0)
                .expect("a barrier pinched in the final step");
            found = Some((tb, last));
            break;
        }
        k += 1;
    }

    let Some((v_valid_min, last)) = found else {
        device.set_all_to_max();
        return Ok(TbRangeReport {
            steps,
            last_barrier: None,
            tb_trace: None,
            range: None,
            failure: Some(format!(
                "barriers {} never pinch inside the top barrier's safety range",
                join_gates(&pending)
            )),
            n_1d: device.n_1d() - start,
        });
    };

    device.set_all_to_max();
    device.set_voltage(last, device.safety()[last].min)?;
    let tb_trace = characterize_gate(device, Gate::TB, tb_range, cfg, model)?;
    device.set_all_to_max();
    let v_valid_max = tb_trace.fit.v_l;
    let (range, failure) = if v_valid_min < v_valid_max {
        (Some(VoltageRange::new(v_valid_min, v_valid_max)), None)
    } else {
        (
            None,
            Some(format!(
                "top barrier cut-off {v_valid_max:.4} V is not above the scan result {v_valid_min:.4} V"
            )),
        )
    };
    Ok(TbRangeReport {
        steps,
        last_barrier: Some(last),
        tb_trace: Some(tb_trace),
        range,
        failure,
        n_1d: device.n_1d() - start,
    })
}

fn join_gates(gates: &[Gate]) -> String {
    gates.iter().map(|g| g.to_string()).collect::<Vec<_>>().join(", ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterizationReport {
    pub iqa: IqaOutcome,
    pub a_max: Option<f64>,
    /// Number of top-barrier increments needed to reach the signal threshold.
    pub tb_raise_steps: usize,
    pub safety_shifted: bool,
    /// Top barrier during the individual gate sweeps.
    pub tb_voltage: Option<f64>,
    pub gates: Vec<GateReport>,
    pub verdict: Verdict,
    pub tb_range: Option<TbRangeReport>,
    pub tb_valid_range: Option<VoltageRange>,
    /// Safety ranges in force at the end of characterization.
    pub safety: GateMap<VoltageRange>,
    /// Sweeps spent on the individual gates.
    pub n_1d_gates: usize,
    /// Sweeps spent establishing the top barrier's valid range.
    pub n_1d_tb_range: usize,
    pub n_1d: usize,
}

impl CharacterizationReport {
    pub fn gate(&self, g: Gate) -> Option<&GateReport> {
        self.gates.iter().find(|r| r.gate == g)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Sets the top barrier to its lower limit (raising it until the device
/// carries enough current) and characterizes the five lower gates one by one
/// with every other gate at its upper limit. Expects a passed i.q.a.
pub fn characterize_device(
    device: &mut Device,
    iqa: IqaOutcome,
    cfg: &CharacterizeConfig,
    model: &dyn BinaryClassifier,
) -> Result<CharacterizationReport> {
    cfg.validate()?;
    let start = device.n_1d();
    let IqaOutcome::Pass { a_max } = iqa else {
        return Ok(CharacterizationReport {
            iqa,
            a_max: None,
            tb_raise_steps: 0,
            safety_shifted: false,
            tb_voltage: None,
            gates: Vec::new(),
            verdict: Verdict::FailedIqa,
            tb_range: None,
            tb_valid_range: None,
            safety: *device.safety(),
            n_1d_gates: 0,
            n_1d_tb_range: 0,
            n_1d: 0,
        });
    };

    let mut report = CharacterizationReport {
        iqa,
        a_max: Some(a_max),
        tb_raise_steps: 0,
        safety_shifted: false,
        tb_voltage: None,
        gates: Vec::new(),
        verdict: Verdict::Working,
        tb_range: None,
        tb_valid_range: None,
        safety: *device.safety(),
        n_1d_gates: 0,
        n_1d_tb_range: 0,
        n_1d: 0,
    };

    device.set_all_to_max();
    let tb_limits = device.safety()[Gate::TB];
    let mut tb = tb_limits.min;
    device.set_voltage(Gate::TB, tb)?;
    let threshold = cfg.signal_threshold * a_max;
    while device.measure()? < threshold {
        let next = tb + cfg.tb_step;
        if next > tb_limits.max + 1e-9 {
            device.set_all_to_max();
            report.verdict = Verdict::Broken {
                gates: vec![Gate::TB],
                reason: format!(
                    "current stays below {:.2} A_max over the top barrier's safety range",
                    cfg.signal_threshold
                ),
            };
            report.safety = *device.safety();
            return Ok(report);
        }
        tb = next;
        report.tb_raise_steps += 1;
        device.set_voltage(Gate::TB, tb)?;
    }
    if report.tb_raise_steps > 0 {
        device.shift_safety(cfg.safety_shift);
        report.safety_shifted = true;
        device.set_all_to_max();
        tb = device.safety()[Gate::TB].clamp(tb);
        device.set_voltage(Gate::TB, tb)?;
    }
    report.tb_voltage = Some(tb);

    for g in Gate::LOWER {
        let r = characterize_gate(device, g, device.safety()[g], cfg, model)?;
        report.gates.push(r);
    }
    report.n_1d_gates = device.n_1d() - start;
    device.set_all_to_max();

    let bad: Vec<Gate> = report.gates.iter().filter(|r| !r.good).map(|r| r.gate).collect();
    if !bad.is_empty() {
        report.verdict = Verdict::Broken {
            reason: format!("poor pinch-off on {}", join_gates(&bad)),
            gates: bad,
        };
    }
    report.safety = *device.safety();
    report.n_1d = device.n_1d() - start;
    Ok(report)
}

/// The whole first stage: i.q.a., gate characterization and, for working
/// devices, the top barrier's valid range.
pub fn run_characterization(
    device: &mut Device,
    cfg: &CharacterizeConfig,
    model: &dyn BinaryClassifier,
) -> Result<CharacterizationReport> {
    cfg.validate()?;
    let start = device.n_1d();
    let iqa = initial_quality_assessment(device, cfg)?;
    let mut report = characterize_device(device, iqa, cfg, model)?;
    if report.verdict == Verdict::Working {
        let tb = establish_tb_valid_range(device, cfg, model)?;
        report.n_1d_tb_range = tb.n_1d;
        report.tb_valid_range = tb.range;
        if let Some(reason) = &tb.failure {
            report.verdict = Verdict::Broken {
                gates: vec![Gate::TB],
                reason: reason.clone(),
            };
        }
        report.tb_range = Some(tb);
    }
    report.safety = *device.safety();
    report.n_1d = device.n_1d() - start;
    Ok(report)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::device::{new_random_device, FaultFlags};

    /// Labels a trace good when it is a clean, complete pinch-off.
    pub(crate) struct RuleClassifier;

    impl BinaryClassifier for RuleClassifier {
        fn predict(&self, x: &[f64]) -> Result<bool> {
            let [a, b, residual, a_l] = [x[0], x[1], x[2], x[3]];
            Ok(a > 0.25 && b > 3.0 && residual < 0.05 && a_l < 0.1)
        }

        fn input_width(&self) -> usize {
            4
        }
    }

    fn run(seed: u64, faults: Option<FaultFlags>) -> (Device, CharacterizationReport) {
        let mut d = Device::new(new_random_device(seed, faults), seed + 100);
        let r = run_characterization(&mut d, &CharacterizeConfig::default(), &RuleClassifier).unwrap();
        (d, r)
    }

    #[test]
    fn sweep_points_follow_resolution() {
        let cfg = CharacterizeConfig::default();
        assert_eq!(cfg.sweep_points(VoltageRange::new(-2.0, 0.0)), 201);
        assert_eq!(cfg.sweep_points(VoltageRange::new(-3.0, 0.0)), 301);
        assert_eq!(cfg.sweep_points(VoltageRange::new(-0.01, 0.0)), 8);
    }

    #[test]
    fn clean_device_is_working_with_a_valid_range() {
        let (d, r) = run(3, None);
        assert!(r.iqa.passed());
        assert_eq!(r.verdict, Verdict::Working, "{:?}", r.verdict);
        assert_eq!(r.gates.len(), 5);
        assert_eq!(r.n_1d_gates, 5);
        assert_eq!(r.n_1d, 5 + r.n_1d_tb_range);
        assert_eq!(r.n_1d, d.n_1d());
        let range = r.tb_valid_range.unwrap();
        let tb = d.safety()[Gate::TB];
        assert!(range.min < range.max);
        assert!(tb.contains(range.min) && tb.contains(range.max));
    }

    #[test]
    fn dead_channel_fails_iqa() {
        let (d, r) = run(1, Some(FaultFlags::dead()));
        assert_eq!(r.verdict, Verdict::FailedIqa);
        assert_eq!(d.n_1d(), 0);
        assert!(d.a_max().is_none());
    }

    #[test]
    fn disconnected_top_barrier_is_broken() {
        let (_, r) = run(2, Some(FaultFlags::unresponsive(Gate::TB)));
        assert!(matches!(r.verdict, Verdict::Broken { .. }), "{:?}", r.verdict);
        assert!(r.gates.iter().all(|g| !g.good));
    }

    #[test]
    fn offset_charges_raise_the_top_barrier() {
        let (d, r) = run(4, Some(FaultFlags::offset_charge()));
        assert!(r.tb_raise_steps >= 1);
        assert!(r.safety_shifted);
        assert!((d.safety()[Gate::LB].max - 0.5).abs() < 1e-12);
        assert_eq!(r.verdict, Verdict::Working, "{:?}", r.verdict);
    }

    #[test]
    fn noise_floor_above_saturation_fails() {
        let mut p = new_random_device(5, None);
        p.layout.noise_floor = 2.0;
        let mut d = Device::new(p, 0);
        let out = initial_quality_assessment(&mut d, &CharacterizeConfig::default()).unwrap();
        assert!(!out.passed());
    }

    #[test]
    fn noiseless_rerun_is_identical() {
        let p = new_random_device(6, None);
        let cfg = CharacterizeConfig::default();
        let a = run_characterization(&mut Device::new(p.clone(), 0).noiseless(), &cfg, &RuleClassifier).unwrap();
        let b = run_characterization(&mut Device::new(p, 0).noiseless(), &cfg, &RuleClassifier).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn every_barrier_pinches_at_the_range_minimum() {
        let (mut d, r) = run(7, None);
        let range = r.tb_valid_range.unwrap();
        d.set_all_to_max();
        d.set_voltage(Gate::TB, range.min).unwrap();
        let mut v = d.voltages();
        for g in Gate::BARRIERS {
            let mut w = v;
            w[g] = d.safety()[g].min;
            assert!(d.physics().noiseless_current(&w) < d.noise_floor(), "{g}");
        }
        v.tb = range.max;
        assert!(d.safety()[Gate::TB].contains(v.tb));
    }
}
