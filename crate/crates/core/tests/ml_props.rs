use dotune_core::ml::{
    accuracy, balanced_split, confusion_matrix, redraw_fluctuation_sweep, train, Dataset, Family, Hyperparams,
    InputKind, Model, PreprocessSpec, Representation,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two overlapping Gaussian blobs in four features.
fn blobs(per_class: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..2 * per_class {
        let label = (i % 2) as u8;
        let shift = if label == 1 { 0.8 } else { -0.8 };
        rows.push((0..4).map(|_| shift + rng.gen_range(-1.5..1.5)).collect());
        labels.push(label);
    }
    Dataset::new(InputKind::Features { width: 4 }, rows, labels).unwrap()
}

fn labels() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..=1, 1..200)
}

proptest! {
    #[test]
    fn perfect_prediction_has_unit_accuracy(y in labels()) {
        let cm = confusion_matrix(&y, &y).unwrap();
        prop_assert_eq!(accuracy(&cm).unwrap(), 1.0);
        prop_assert_eq!(cm.fp + cm.fn_, 0.0);
    }

    #[test]
    fn confusion_counts_add_up(y in labels(), flips in prop::collection::vec(any::<bool>(), 200)) {
        let p: Vec<u8> = y.iter().zip(&flips).map(|(&l, &f)| if f { 1 - l } else { l }).collect();
        let cm = confusion_matrix(&y, &p).unwrap();
        let positives = y.iter().filter(|&&l| l == 1).count() as f64;
        prop_assert_eq!(cm.total(), y.len() as f64);
        prop_assert_eq!(cm.tp + cm.fn_, positives);
        let a = accuracy(&cm).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn splits_are_balanced_and_disjoint(per_class in 5usize..60, seed in any::<u64>()) {
        let data = blobs(per_class, 1);
        let (tr, te) = balanced_split(&data, seed).unwrap();
        let ones = |idx: &[usize]| idx.iter().filter(|&&i| data.labels[i] == 1).count();
        prop_assert_eq!(2 * ones(&tr), tr.len());
        prop_assert_eq!(2 * ones(&te), te.len());
        prop_assert!(tr.iter().all(|i| !te.contains(i)));
        prop_assert_eq!(tr.len() + te.len(), 2 * per_class);
    }
}

#[test]
fn models_survive_serialization() {
    let data = blobs(40, 3);
    let probe = blobs(20, 4);
    for family in Family::ALL {
        let model = train(&data, &Hyperparams::default_for(family), PreprocessSpec::new(Representation::Features, None)).unwrap();
        let back = Model::from_json(&model.to_json().unwrap()).unwrap();
        for row in &probe.rows {
            assert_eq!(model.predict_proba(row).unwrap(), back.predict_proba(row).unwrap(), "{family:?}");
        }
    }
}

#[test]
fn fluctuation_sweep_needs_a_repeat_and_is_deterministic() {
    let data = blobs(30, 5);
    let h = Hyperparams::default_for(Family::LogisticRegression);
    let spec = PreprocessSpec::new(Representation::Features, None);
    assert!(redraw_fluctuation_sweep(&data, &h, spec, &[2, 4], 0, 7).is_err());
    let a = redraw_fluctuation_sweep(&data, &h, spec, &[2, 4], 3, 7).unwrap();
    let b = redraw_fluctuation_sweep(&data, &h, spec, &[2, 4], 3, 7).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.iter().map(|p| p.n).collect::<Vec<_>>(), vec![2, 4]);
    let single = redraw_fluctuation_sweep(&data, &h, spec, &[2], 1, 7).unwrap();
    assert_eq!(single[0].mean_spread, 0.0);
    assert_eq!(single[0].mean, a[0].mean);
}
