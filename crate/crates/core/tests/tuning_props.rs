use dotune_core::characterize::{run_characterization, CharacterizeConfig, Verdict};
use dotune_core::device::{new_random_device, Device, VoltageRange};
use dotune_core::ml::BinaryClassifier;
use dotune_core::tuner::{run_tuning, voltage_delta, Direction, Event, OracleAssessor, TunerConfig};
use proptest::prelude::*;

/// Accepts clean, complete pinch-offs from their fit features.
struct CleanPinchoff;

impl BinaryClassifier for CleanPinchoff {
    fn predict(&self, x: &[f64]) -> dotune_core::Result<bool> {
        Ok(x[0] > 0.25 && x[1] > 3.0 && x[2] < 0.05 && x[3] < 0.1)
    }

    fn input_width(&self) -> usize {
        4
    }
}

proptest! {
    #[test]
    fn voltage_steps_stay_clamped(lo in -3.0..-0.5f64, span in 0.5..3.0f64, u in 0.0..=1.0f64, low in any::<bool>()) {
        let cfg = TunerConfig::default();
        let range = VoltageRange::new(lo, lo + span);
        let v = lo + u * span;
        let dir = if low { Direction::TooLow } else { Direction::TooHigh };
        let new = voltage_delta(v, range, dir, &cfg);
        prop_assert!(range.contains(new));
        let step = (new - v).abs();
        let room = if low { range.max - v } else { v - range.min };
        let (a, b) = cfg.delta_clamp;
        prop_assert!(step <= b + 1e-12);
        prop_assert!(step >= a.min(room) - 1e-12, "step {step}, room {room}");
        let forward = if low { new >= v } else { new <= v };
        prop_assert!(forward);
    }
}

#[test]
fn tuning_runs_are_legal_and_bounded() {
    let cfg = TunerConfig {
        max_2d: 6,
        ..TunerConfig::default()
    };
    let mut tuned = 0;
    for seed in 20..26 {
        let mut d = Device::new(new_random_device(seed, None), seed);
        let report = run_characterization(&mut d, &CharacterizeConfig::default(), &CleanPinchoff).unwrap();
        assert_eq!(report.n_1d, report.n_1d_gates + report.n_1d_tb_range);
        assert_eq!(report.n_1d, d.n_1d());
        if report.verdict != Verdict::Working {
            continue;
        }
        let (n1, n2) = (d.n_1d(), d.n_2d());
        let t = run_tuning(&mut d, &report, &cfg, &CleanPinchoff, &OracleAssessor).unwrap();
        assert!(t.transitions_are_legal(), "seed {seed}: {:?}", t.stages);
        assert!(t.n_2d <= cfg.max_2d && t.n_1d <= cfg.max_1d(), "seed {seed}: {} / {}", t.n_1d, t.n_2d);
        assert_eq!((d.n_1d() - n1, d.n_2d() - n2), (t.n_1d, t.n_2d));
        assert!(t.log.windows(2).all(|w| w[0].step < w[1].step && w[0].n_2d <= w[1].n_2d));
        for e in &t.log {
            if let Event::CentralBarrierChanged { from, to, .. } = e.event {
                assert!(to < from, "seed {seed}: a double-dot search raised CB {from} -> {to}");
            }
        }
        tuned += t.success as usize;
    }
    assert!(tuned > 0);
}
