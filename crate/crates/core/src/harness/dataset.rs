//! Labelled synthetic corpora for the four classification tasks.
//!
//! Every record is generated from its own seed, so a corpus is a pure
//! function of `(task, count, master seed)` and can be built in parallel.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::charge_map::{ChargeMapConfig, CurrentMap};
use crate::device::{new_random_device, Device, DevicePhysics, FaultFlags, Gate, GateMap, Regime, RegimeTarget, VoltagePlanner};
use crate::ml::{Dataset, InputKind, Representation};
use crate::pinchoff::{analyze, features, Trace, DEFAULT_SMOOTHING};
use crate::{derive_seed, Error, Result};

/// Samples per stored pinch-off trace.
pub const TRACE_LEN: usize = 128;
/// Points per characterization sweep over a 2 V range.
const SWEEP_POINTS: usize = 201;
/// Attempts at drawing a scenario before falling back to another one.
const MAX_TRIES: usize = 200;
const MIN_PER_CLASS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Pinchoff,
    SingleDot,
    DoubleDot,
    Regime,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Pinchoff, Task::SingleDot, Task::DoubleDot, Task::Regime];

    pub fn name(self) -> &'static str {
        match self {
            Task::Pinchoff => "pinchoff",
            Task::SingleDot => "single_dot",
            Task::DoubleDot => "double_dot",
            Task::Regime => "regime",
        }
    }

    pub fn class_names(self) -> [&'static str; 2] {
        match self {
            Task::Regime => ["single_dot", "double_dot"],
            _ => ["bad", "good"],
        }
    }

    fn stream(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Pinchoff,
    Segment,
}

/// One labelled example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub kind: RecordKind,
    pub task: Task,
    pub label: u8,
    /// Seed the record was generated from.
    pub seed: u64,
    /// Generating scenario, e.g. `good` or `dead_channel`.
    pub scenario: String,
    pub device_seed: u64,
    pub faults: FaultFlags,
    /// Gate voltages at the trace start or the tile centre.
    pub voltages: GateMap<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<Gate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixels: Option<Vec<f64>>,
}

/// Generates `per_class` records of each label, interleaved bad/good.
pub fn gen_dataset(task: Task, per_class: usize, seed: u64) -> Result<Vec<Record>> {
    if per_class < MIN_PER_CLASS {
        return Err(Error::InvalidArgument(format!(
            "at least {MIN_PER_CLASS} examples per class are required, got {per_class}"
        )));
    }
    let base = derive_seed(seed, task.stream());
    (0..2 * per_class as u64)
        .into_par_iter()
        .map(|i| {
            let s = derive_seed(base, i);
            let label = (i % 2) as u8;
            match task {
                Task::Pinchoff => pinchoff_record(label, s),
                _ => tile_record(task, label, s),
            }
        })
        .collect()
}

pub fn write_jsonl(path: &Path, records: &[Record]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Record>> {
    let f = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(&line)
            .map_err(|e| Error::Serialization(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(r);
    }
    Ok(out)
}

/// Builds the classifier dataset of `records` in the shape `representation`
/// expects: features for [`Representation::Features`], traces or tiles
/// otherwise.
pub fn to_dataset(records: &[Record], representation: Representation) -> Result<Dataset> {
    let first = records.first().ok_or_else(|| Error::Dataset("no records".into()))?;
    let task = first.task;
    if let Some(r) = records.iter().find(|r| r.task != task) {
        return Err(Error::Dataset(format!("mixed tasks {task} and {}", r.task)));
    }
    let pick = |r: &Record| -> Result<Vec<f64>> {
        let v = match (first.kind, representation) {
            (RecordKind::Pinchoff, Representation::Features) => r.features.as_ref(),
            (RecordKind::Pinchoff, _) => r.trace.as_ref(),
            (RecordKind::Segment, _) => r.pixels.as_ref(),
        };
        v.cloned()
            .ok_or_else(|| Error::Dataset(format!("record {} lacks the {} input", r.seed, representation.name())))
    };
    let rows: Vec<Vec<f64>> = records.iter().map(pick).collect::<Result<_>>()?;
    let width = rows[0].len();
    let input = match (first.kind, representation) {
        (RecordKind::Pinchoff, Representation::Features) => InputKind::Features { width },
        (RecordKind::Pinchoff, _) => InputKind::Trace { len: width },
        (RecordKind::Segment, _) => {
            let side = (width as f64).sqrt().round() as usize;
            if side * side != width {
                return Err(Error::Shape(format!("{width} pixels do not form a square tile")));
            }
            InputKind::Image { side }
        }
    };
    let labels = records.iter().map(|r| r.label).collect();
    let [a, b] = task.class_names();
    Dataset::with_names(input, rows, labels, [a.into(), b.into()])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TraceScenario {
    Good,
    DeadChannel,
    Unresponsive,
    NoPinch,
    Partial,
    Closed,
    Noisy,
}

impl TraceScenario {
    const BAD: [TraceScenario; 6] = [
        TraceScenario::DeadChannel,
        TraceScenario::Unresponsive,
        TraceScenario::NoPinch,
        TraceScenario::Partial,
        TraceScenario::Closed,
        TraceScenario::Noisy,
    ];

    fn name(self) -> &'static str {
        match self {
            TraceScenario::Good => "good",
            TraceScenario::DeadChannel => "dead_channel",
            TraceScenario::Unresponsive => "unresponsive_gate",
            TraceScenario::NoPinch => "no_pinch",
            TraceScenario::Partial => "partial_pinch",
            TraceScenario::Closed => "closed",
            TraceScenario::Noisy => "noisy",
        }
    }
}

/// Voltages of a characterization sweep start: every lower gate at its upper
/// limit and the top barrier at `tb`.
fn sweep_start(p: &DevicePhysics, tb: f64) -> GateMap<f64> {
    let mut v = p.layout.safety.map(|_, r| r.max);
    v.tb = tb;
    v
}

/// Transmission of `gate` at both ends of its range.
fn end_transmissions(p: &DevicePhysics, gate: Gate, start: &GateMap<f64>) -> (f64, f64) {
    let mut v = *start;
    let r = p.layout.safety[gate];
    v[gate] = r.min;
    let lo = p.transmission(gate, &v);
    v[gate] = r.max;
    (lo, p.transmission(gate, &v))
}

fn pinchoff_record(label: u8, seed: u64) -> Result<Record> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let device_seed: u64 = rng.gen();
    let gate = *Gate::LOWER.choose(&mut rng).expect("lower gates");
    let blocker = **Gate::LOWER
        .iter()
        .filter(|&&g| g != gate)
        .collect::<Vec<_>>()
        .choose(&mut rng)
        .expect("other lower gates");
    let scenario = if label == 1 {
        TraceScenario::Good
    } else {
        *TraceScenario::BAD.choose(&mut rng).expect("bad scenarios")
    };

    let faults = match scenario {
        TraceScenario::DeadChannel => FaultFlags::dead(),
        TraceScenario::Unresponsive => FaultFlags::unresponsive(gate),
        _ => FaultFlags::none(),
    };
    // Scenario geometry is decided on the healthy device.
    let healthy = new_random_device(device_seed, None);
    let tb_range = healthy.layout.safety.tb;
    let mut chosen = None;
    for _ in 0..MAX_TRIES {
        let mut v = sweep_start(&healthy, rng.gen_range(tb_range.min..tb_range.max));
        let (lo, hi) = end_transmissions(&healthy, gate, &v);
        let ok = match scenario {
            TraceScenario::Good
            | TraceScenario::Noisy
            | TraceScenario::DeadChannel
            | TraceScenario::Unresponsive => lo < 0.01 && hi > 0.97,
            TraceScenario::NoPinch => lo > 0.5,
            TraceScenario::Partial => (0.05..0.3).contains(&lo) && hi > 0.9,
            TraceScenario::Closed => {
                v[blocker] = healthy.layout.safety[blocker].min;
                healthy.transmission(blocker, &v) < 0.01
            }
        };
        if ok {
            chosen = Some(v);
            break;
        }
    }
    let v = chosen.ok_or_else(|| {
        Error::Dataset(format!("device {device_seed} cannot realise a {} trace of {gate}", scenario.name()))
    })?;

    let mut p = new_random_device(device_seed, Some(faults));
    p.noise_sigma = match scenario {
        TraceScenario::Noisy => rng.gen_range(0.04..0.12),
        _ => rng.gen_range(0.002..0.01),
    };
    // A_max as the initial assessment would have measured it, on the device
    // before any fault set in.
    let mut twin = healthy.clone();
    twin.noise_sigma = p.noise_sigma;
    let a_max = Device::new(twin, derive_seed(seed, 2)).measure_a_max_safe_max()?;
    let mut device = Device::new(p, derive_seed(seed, 1));
    device.set_voltages(&v)?;
    let range = device.safety()[gate];
    let raw = device.sweep_1d(gate, range.max, range.min, SWEEP_POINTS)?;
    let trace = Trace::from_raw(&raw, a_max)?;
    let fit = analyze(&trace, DEFAULT_SMOOTHING)?;
    Ok(Record {
        kind: RecordKind::Pinchoff,
        task: Task::Pinchoff,
        label,
        seed,
        scenario: scenario.name().into(),
        device_seed,
        faults,
        voltages: v,
        gate: Some(gate),
        features: Some(features(&fit).as_slice().to_vec()),
        trace: Some(trace.resampled(TRACE_LEN)),
        pixels: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TileScenario {
    Good(Regime),
    /// A clean tile of the other regime.
    Opposite(Regime),
    Closed,
    Open,
    Empty,
    Noisy(Regime),
    Smeared(Regime),
}

impl TileScenario {
    fn name(self) -> String {
        let r = |r: Regime| match r {
            Regime::SingleDot => "single_dot",
            Regime::DoubleDot => "double_dot",
            Regime::NoDot => "no_dot",
        };
        match self {
            TileScenario::Good(g) => format!("good_{}", r(g)),
            TileScenario::Opposite(g) => format!("clean_{}", r(g)),
            TileScenario::Closed => "closed_barriers".into(),
            TileScenario::Open => "open_barriers".into(),
            TileScenario::Empty => "empty_dots".into(),
            TileScenario::Noisy(g) => format!("noisy_{}", r(g)),
            TileScenario::Smeared(g) => format!("smeared_{}", r(g)),
        }
    }

    /// Regime every probe point of the tile must show.
    fn oracle(self) -> Regime {
        match self {
            TileScenario::Good(r) | TileScenario::Opposite(r) | TileScenario::Noisy(r) | TileScenario::Smeared(r) => r,
            TileScenario::Closed | TileScenario::Open | TileScenario::Empty => Regime::NoDot,
        }
    }
}

fn scenario_for(task: Task, label: u8, rng: &mut ChaCha8Rng) -> TileScenario {
    let (own, other) = match task {
        Task::SingleDot => (Regime::SingleDot, Regime::DoubleDot),
        _ => (Regime::DoubleDot, Regime::SingleDot),
    };
    match (task, label) {
        (Task::Regime, 1) => TileScenario::Good(Regime::DoubleDot),
        (Task::Regime, _) => TileScenario::Good(Regime::SingleDot),
        (_, 1) => TileScenario::Good(own),
        _ => *[
            TileScenario::Opposite(other),
            TileScenario::Closed,
            TileScenario::Open,
            TileScenario::Empty,
            TileScenario::Noisy(own),
            TileScenario::Smeared(own),
        ]
        .choose(rng)
        .expect("bad scenarios"),
    }
}

fn target_for(scenario: TileScenario, tb: f64, rng: &mut ChaCha8Rng) -> RegimeTarget {
    let regime = scenario.oracle();
    let kappa = match regime {
        Regime::SingleDot => rng.gen_range(0.65..0.97),
        _ => rng.gen_range(0.08..0.42),
    };
    let mut t = RegimeTarget {
        tb,
        outer_transmission: (rng.gen_range(0.08..0.45), rng.gen_range(0.08..0.45)),
        kappa,
        induced: [rng.gen_range(1.5..12.0), rng.gen_range(1.5..12.0)],
    };
    match scenario {
        TileScenario::Closed => t.outer_transmission = (rng.gen_range(0.0005..0.008), rng.gen_range(0.0005..0.008)),
        TileScenario::Open => {
            // at least one barrier past the confinement limit
            let open = rng.gen_range(0.52..0.97);
            let other = rng.gen_range(0.08..0.45);
            t.outer_transmission = if rng.gen_bool(0.5) { (open, other) } else { (other, open) };
        }
        TileScenario::Empty => t.induced = [rng.gen_range(-3.0..0.3), rng.gen_range(-3.0..0.3)],
        _ => {}
    }
    t
}

fn tile_record(task: Task, label: u8, seed: u64) -> Result<Record> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenario = scenario_for(task, label, &mut rng);
    let cfg = ChargeMapConfig::default();
    let half = cfg.segment_size / 2.0 - cfg.pixel_pitch() / 2.0;
    let (lo_current, hi_current) = cfg.current_window;
    let checks_window = !matches!(scenario, TileScenario::Closed | TileScenario::Empty);

    for _ in 0..MAX_TRIES {
        let device_seed: u64 = rng.gen();
        let mut p = new_random_device(device_seed, None);
        let tb_range = p.layout.safety.tb;
        let target = target_for(scenario, rng.gen_range(tb_range.min..tb_range.max), &mut rng);
        let Ok(v) = VoltagePlanner::new(&p).voltages_for(&target, &p.layout.safety) else {
            continue;
        };
        let probe = |dx: f64, dy: f64| {
            let mut w = v;
            w.lp += dx;
            w.rp += dy;
            w
        };
        let probes = [probe(0.0, 0.0), probe(-half, -half), probe(half, -half), probe(-half, half), probe(half, half)];
        let safe = |w: &GateMap<f64>| Gate::ALL.iter().all(|&g| p.layout.safety[g].contains(w[g]));
        let reach = cfg.segment_size / 2.0 + cfg.delta_v_max;
        let grid_corners = [probe(-reach, -reach), probe(reach, reach)];
        if !grid_corners.iter().all(safe) || !probes.iter().all(|w| safe(w) && p.oracle_regime(w) == scenario.oracle()) {
            continue;
        }
        let mut center = p.clone();
        if let TileScenario::Smeared(_) = scenario {
            center.broadening *= rng.gen_range(4.0..10.0);
        }
        let mean_clean = tile_mean(&center, &v, half);
        if checks_window && !(lo_current..hi_current).contains(&mean_clean) {
            continue;
        }
        p = center;
        p.noise_sigma = match scenario {
            TileScenario::Noisy(_) => rng.gen_range(0.03..0.08),
            _ => rng.gen_range(0.002..0.008),
        };
        let a_max = p.a_sat;
        let mut device = Device::new(p, derive_seed(seed, 1));
        device.set_voltages(&v)?;
        let pixels = coarse_tile(&mut device, &v, &cfg, a_max, &mut rng)?;
        return Ok(Record {
            kind: RecordKind::Segment,
            task,
            label,
            seed,
            scenario: scenario.name(),
            device_seed,
            faults: FaultFlags::none(),
            voltages: v,
            gate: None,
            features: None,
            trace: None,
            pixels: Some(pixels),
        });
    }
    Err(Error::Dataset(format!(
        "could not place a {} tile for seed {seed}",
        scenario.name()
    )))
}

/// Measures a tile the way a diagram does: on a grid no finer than
/// `delta_v_max`, at a random phase, then resampled onto the tile pixels.
fn coarse_tile(device: &mut Device, v: &GateMap<f64>, cfg: &ChargeMapConfig, a_max: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let step = rng.gen_range(0.5 * cfg.delta_v_max..=cfg.delta_v_max);
    let size = cfg.segment_size;
    let axis = |c: f64, phase: f64| {
        let lo = c - size / 2.0 - phase * step;
        let n = ((size + phase * step) / step).ceil() as usize + 1;
        (lo, lo + (n - 1) as f64 * step, n)
    };
    let (x0, x1, nx) = axis(v.lp, rng.gen());
    let (y0, y1, ny) = axis(v.rp, rng.gen());
    let raw = device.sweep_2d(Gate::LP, Gate::RP, (x0, x1), (y0, y1), nx, ny)?;
    let map = CurrentMap::from_raw(raw, a_max, 0)?;
    let pitch = cfg.pixel_pitch();
    let (ox, oy) = (v.lp - size / 2.0, v.rp - size / 2.0);
    let n = cfg.pixel_size;
    Ok((0..n)
        .flat_map(|py| (0..n).map(move |px| (px, py)))
        .map(|(px, py)| map.sample(ox + (px as f64 + 0.5) * pitch, oy + (py as f64 + 0.5) * pitch))
        .collect())
}

/// Noiseless mean current over a 5×5 grid covering the tile.
fn tile_mean(p: &DevicePhysics, v: &GateMap<f64>, half: f64) -> f64 {
    let mut sum = 0.0;
    for i in 0..5 {
        for j in 0..5 {
            let mut w = *v;
            w.lp += half * (i as f64 / 2.0 - 1.0);
            w.rp += half * (j as f64 / 2.0 - 1.0);
            sum += p.noiseless_current(&w);
        }
    }
    sum / 25.0 / p.a_sat
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classes_are_balanced_and_seeded() {
        let d = gen_dataset(Task::Pinchoff, 10, 7).unwrap();
        assert_eq!(d.len(), 20);
        assert_eq!(d.iter().filter(|r| r.label == 1).count(), 10);
        assert_eq!(d, gen_dataset(Task::Pinchoff, 10, 7).unwrap());
        assert!(gen_dataset(Task::Pinchoff, 9, 7).is_err());
    }

    #[test]
    fn regime_labels_follow_the_oracle() {
        for r in gen_dataset(Task::Regime, 10, 3).unwrap() {
            let p = new_random_device(r.device_seed, None);
            let want = if r.label == 1 { Regime::DoubleDot } else { Regime::SingleDot };
            assert_eq!(p.oracle_regime(&r.voltages), want);
            assert_eq!(r.pixels.as_ref().unwrap().len(), 28 * 28);
        }
    }

    #[test]
    fn dataset_views() {
        let recs = gen_dataset(Task::Pinchoff, 10, 1).unwrap();
        let f = to_dataset(&recs, Representation::Features).unwrap();
        assert_eq!(f.input, InputKind::Features { width: 4 });
        let t = to_dataset(&recs, Representation::Raw).unwrap();
        assert_eq!(t.input, InputKind::Trace { len: TRACE_LEN });
    }
}
