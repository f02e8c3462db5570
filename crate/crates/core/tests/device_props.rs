use dotune_core::device::{new_random_device, Device, FaultFlags, Gate, GateMap};
use proptest::prelude::*;

fn voltages(seed: u64, unit: [f64; 6]) -> (dotune_core::device::DevicePhysics, GateMap<f64>) {
    let p = new_random_device(seed, None);
    let v = GateMap::from_fn(|g| {
        let r = p.layout.safety[g];
        r.min + unit[g.index()] * r.span()
    });
    (p, v)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn noiseless_current_stays_between_zero_and_saturation(seed in 0u64..500, unit in prop::array::uniform6(0.0..=1.0f64)) {
        let (p, v) = voltages(seed, unit);
        let i = p.noiseless_current(&v);
        prop_assert!(i >= 0.0 && i <= p.a_sat + 1e-12, "{i} vs {}", p.a_sat);
    }

    #[test]
    fn raising_a_barrier_never_lowers_its_transmission(
        seed in 0u64..500,
        unit in prop::array::uniform6(0.0..=1.0f64),
        gate in prop::sample::select(Gate::LOWER.to_vec()),
        step in 0.0..=1.0f64,
    ) {
        let (p, v) = voltages(seed, unit);
        let mut w = v;
        w[gate] = v[gate] + step * (p.layout.safety[gate].max - v[gate]);
        prop_assert!(p.transmission(gate, &w) >= p.transmission(gate, &v) - 1e-12);
    }

    #[test]
    fn dead_channels_stay_below_the_noise_floor(seed in 0u64..500, unit in prop::array::uniform6(0.0..=1.0f64)) {
        let p = new_random_device(seed, Some(FaultFlags::dead()));
        let v = GateMap::from_fn(|g| {
            let r = p.layout.safety[g];
            r.min + unit[g.index()] * r.span()
        });
        prop_assert!(p.noiseless_current(&v) < p.layout.noise_floor);
    }

    #[test]
    fn sweeps_restore_the_gate_voltages(
        seed in 0u64..200,
        gate in prop::sample::select(Gate::ALL.to_vec()),
        a in 0.0..=1.0f64,
        b in 0.0..=1.0f64,
        n in 2usize..40,
    ) {
        let mut d = Device::new(new_random_device(seed, None), seed);
        d.set_voltage(Gate::CB, d.safety()[Gate::CB].min).unwrap();
        let before = d.voltages();
        let r = d.safety()[gate];
        let s = d.sweep_1d(gate, r.min + a * r.span(), r.min + b * r.span(), n).unwrap();
        prop_assert_eq!(s.currents.len(), n);
        prop_assert_eq!(d.voltages(), before);
        prop_assert_eq!(d.n_1d(), 1);
    }

    #[test]
    fn noiseless_sweeps_are_reproducible(seed in 0u64..200, session in any::<u64>()) {
        let p = new_random_device(seed, None);
        let r = p.layout.safety[Gate::LB];
        let mut a = Device::new(p.clone(), session).noiseless();
        let mut b = Device::new(p, session.wrapping_add(1)).noiseless();
        let sa = a.sweep_1d(Gate::LB, r.max, r.min, 30).unwrap();
        let sb = b.sweep_1d(Gate::LB, r.max, r.min, 30).unwrap();
        prop_assert_eq!(sa, sb);
    }
}

#[test]
fn white_noise_has_the_configured_variance() {
    let p = new_random_device(11, None);
    let sigma = p.noise_sigma;
    let mut d = Device::new(p.clone(), 5);
    // Park the left barrier half-way up its pinch-off, away from both clamps.
    let r = d.safety()[Gate::LB];
    let mut v = d.voltages();
    let mut best = (f64::INFINITY, v.lb);
    for k in 0..=400 {
        v.lb = r.min + r.span() * k as f64 / 400.0;
        let dist = (p.noiseless_current(&v) - 0.5 * p.a_sat).abs();
        if dist < best.0 {
            best = (dist, v.lb);
        }
    }
    d.set_voltage(Gate::LB, best.1).unwrap();
    let exact = p.noiseless_current(&d.voltages());
    let n = 20_000;
    let samples: Vec<f64> = (0..n).map(|_| d.measure().unwrap() - exact).collect();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    // A sample variance from n normal draws has relative spread sqrt(2 / n).
    let tol = 4.0 * (2.0 / n as f64).sqrt();
    assert!((var / (sigma * sigma) - 1.0).abs() < tol, "{var} vs {}", sigma * sigma);
    assert!(mean.abs() < 4.0 * sigma / (n as f64).sqrt());
}
