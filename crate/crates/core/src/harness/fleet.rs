use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ModelSet, RunConfig};
use crate::characterize::{run_characterization, CharacterizationReport, IqaOutcome, Verdict};
use crate::device::{new_random_device, Device, FaultFlags, Regime};
use crate::tuner::{run_tuning, OracleAssessor, SegmentAssessor, TuningResult};
use crate::ml::BinaryClassifier;
use crate::{derive_seed, Result};

/// Columns of the fleet CSV, in order.
pub const FLEET_CSV_HEADER: &str =
    "cooldown,device,device_seed,faults,iqa,n_1d,verdict,tuning_n_1d,tuning_n_2d,success,oracle_regime,error";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub id: String,
    pub device_seed: u64,
    pub faults: FaultFlags,
}

impl DeviceSpec {
    pub fn fault_label(&self) -> String {
        let f = &self.faults;
        let mut parts = Vec::new();
        if f.dead_channel {
            parts.push("dead_channel".to_string());
        }
        if let Some(g) = f.unresponsive_gate {
            parts.push(format!("unresponsive_{g}"));
        }
        if f.offset_charge {
            parts.push("offset_charge".to_string());
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

/// The devices of a fleet: dead channels first, then unresponsive gates,
/// offset charges and healthy devices.
pub fn fleet_devices(cfg: &RunConfig) -> Vec<DeviceSpec> {
    let f = &cfg.fleet;
    let width = f.count.to_string().len().max(2);
    (0..f.count)
        .map(|i| {
            let faults = if i < f.dead_channel {
                FaultFlags::dead()
            } else if i < f.dead_channel + f.unresponsive {
                FaultFlags::unresponsive(f.unresponsive_gate)
            } else if i < f.dead_channel + f.unresponsive + f.offset_charge {
                FaultFlags::offset_charge()
            } else {
                FaultFlags::none()
            };
            DeviceSpec {
                id: format!("D{:0width$}", i + 1),
                device_seed: derive_seed(cfg.seed, 10_000 + i as u64),
                faults,
            }
        })
        .collect()
}

/// Outcome of one device in one cooldown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetRow {
    pub cooldown: usize,
    pub device: String,
    pub device_seed: u64,
    pub faults: String,
    /// `pass` or `fail`.
    pub iqa: String,
    /// Sweeps spent on characterization.
    pub n_1d: usize,
    pub verdict: String,
    pub tuning_n_1d: Option<usize>,
    pub tuning_n_2d: Option<usize>,
    pub success: Option<bool>,
    pub oracle_regime: Option<Regime>,
    pub error: Option<String>,
}

impl FleetRow {
    fn csv(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_default();
        let quote = |s: &str| {
            if s.contains([',', '"', '\n']) {
                format!("\"{}\"", s.replace('"', "\"\""))
            } else {
                s.to_string()
            }
        };
        [
            self.cooldown.to_string(),
            self.device.clone(),
            self.device_seed.to_string(),
            self.faults.clone(),
            self.iqa.clone(),
            self.n_1d.to_string(),
            self.verdict.clone(),
            opt(self.tuning_n_1d.map(|v| v.to_string())),
            opt(self.tuning_n_2d.map(|v| v.to_string())),
            opt(self.success.map(|v| v.to_string())),
            opt(self.oracle_regime.map(|r| format!("{r:?}"))),
            quote(self.error.as_deref().unwrap_or("")),
        ]
        .join(",")
    }

    /// Tuned and confirmed by the oracle to sit in a double dot.
    pub fn reached_double_dot(&self) -> bool {
        self.success == Some(true) && self.oracle_regime == Some(Regime::DoubleDot)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FleetSummary {
    pub devices: usize,
    pub failed_iqa: usize,
    pub broken: usize,
    pub working: usize,
    pub tuned: usize,
    pub double_dot: usize,
    pub errors: usize,
}

impl FleetSummary {
    fn of(rows: &[FleetRow]) -> Self {
        let count = |f: &dyn Fn(&FleetRow) -> bool| rows.iter().filter(|r| f(r)).count();
        Self {
            devices: rows.len(),
            failed_iqa: count(&|r| r.verdict == Verdict::FailedIqa.label()),
            broken: count(&|r| r.verdict == "broken"),
            working: count(&|r| r.verdict == Verdict::Working.label()),
            tuned: count(&|r| r.success == Some(true)),
            double_dot: count(&|r| r.reached_double_dot()),
            errors: count(&|r| r.error.is_some()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CooldownReport {
    pub cooldown: usize,
    pub summary: FleetSummary,
    pub rows: Vec<FleetRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetReport {
    pub seed: u64,
    pub cooldowns: Vec<CooldownReport>,
}

impl FleetReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(FLEET_CSV_HEADER);
        s.push('\n');
        for row in self.cooldowns.iter().flat_map(|c| &c.rows) {
            s.push_str(&row.csv());
            s.push('\n');
        }
        s
    }

    pub fn rows(&self) -> impl Iterator<Item = &FleetRow> {
        self.cooldowns.iter().flat_map(|c| &c.rows)
    }
}

/// Everything one device run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceOutcome {
    pub row: FleetRow,
    pub characterization: Option<CharacterizationReport>,
    pub tuning: Option<TuningResult>,
}

/// Characterizes one device and, when `tune` is set and it works, tunes it.
/// Failures end up in the row instead of aborting.
pub fn run_device(
    spec: &DeviceSpec,
    cooldown: usize,
    cfg: &RunConfig,
    pinch: &dyn BinaryClassifier,
    assessor: &dyn SegmentAssessor,
    tune: bool,
) -> DeviceOutcome {
    let physics = new_random_device(spec.device_seed, Some(spec.faults));
    let mut device = Device::new(physics, derive_seed(spec.device_seed, 1 + cooldown as u64));
    let mut row = FleetRow {
        cooldown,
        device: spec.id.clone(),
        device_seed: spec.device_seed,
        faults: spec.fault_label(),
        iqa: "fail".into(),
        n_1d: 0,
        verdict: String::new(),
        tuning_n_1d: None,
        tuning_n_2d: None,
        success: None,
        oracle_regime: None,
        error: None,
    };
    let report = match run_characterization(&mut device, &cfg.characterize, pinch) {
        Ok(r) => r,
        Err(e) => {
            row.n_1d = device.n_1d();
            row.verdict = "error".into();
            row.error = Some(e.to_string());
            return DeviceOutcome {
                row,
                characterization: None,
                tuning: None,
            };
        }
    };
    row.iqa = match report.iqa {
        IqaOutcome::Pass { .. } => "pass".into(),
        IqaOutcome::Fail { .. } => "fail".into(),
    };
    row.n_1d = report.n_1d;
    row.verdict = report.verdict.label().into();
    let mut tuning = None;
    if tune && report.verdict == Verdict::Working {
        let (n1, n2) = (device.n_1d(), device.n_2d());
        match run_tuning(&mut device, &report, &cfg.tuner, pinch, assessor) {
            Ok(t) => {
                row.tuning_n_1d = Some(t.n_1d);
                row.tuning_n_2d = Some(t.n_2d);
                row.success = Some(t.success);
                row.oracle_regime = t.oracle_regime;
                tuning = Some(t);
            }
            Err(e) => {
                row.tuning_n_1d = Some(device.n_1d() - n1);
                row.tuning_n_2d = Some(device.n_2d() - n2);
                row.success = Some(false);
                row.error = Some(e.to_string());
            }
        }
    }
    DeviceOutcome {
        row,
        characterization: Some(report),
        tuning,
    }
}

/// Runs the whole fleet once per cooldown across the worker pool.
pub fn run_fleet(cfg: &RunConfig, models: &ModelSet, tune: bool) -> Result<(FleetReport, Vec<DeviceOutcome>)> {
    run_fleet_with(cfg, &models.pinchoff, &models.trio(), tune)
}

/// Characterization only: i.q.a. and gate sweeps, no tuning.
pub fn characterize_fleet(cfg: &RunConfig, pinch: &dyn BinaryClassifier) -> Result<(FleetReport, Vec<DeviceOutcome>)> {
    run_fleet_with(cfg, pinch, &OracleAssessor, false)
}

pub fn run_fleet_with(
    cfg: &RunConfig,
    pinch: &dyn BinaryClassifier,
    assessor: &dyn SegmentAssessor,
    tune: bool,
) -> Result<(FleetReport, Vec<DeviceOutcome>)> {
    cfg.validate()?;
    let devices = fleet_devices(cfg);
    let jobs: Vec<(usize, &DeviceSpec)> = (0..cfg.fleet.cooldowns)
        .flat_map(|c| devices.iter().map(move |d| (c, d)))
        .collect();
    let outcomes: Vec<DeviceOutcome> = cfg.in_pool(|| {
        jobs.par_iter()
            .map(|&(c, d)| run_device(d, c, cfg, pinch, assessor, tune))
            .collect()
    })?;
    let cooldowns = (0..cfg.fleet.cooldowns)
        .map(|c| {
            let rows: Vec<FleetRow> = outcomes.iter().filter(|o| o.row.cooldown == c).map(|o| o.row.clone()).collect();
            CooldownReport {
                cooldown: c,
                summary: FleetSummary::of(&rows),
                rows,
            }
        })
        .collect();
    Ok((FleetReport { seed: cfg.seed, cooldowns }, outcomes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::characterize::tests::RuleClassifier;
    use crate::harness::FleetConfig;

    fn small(count: usize, dead: usize, unresponsive: usize, cooldowns: usize) -> RunConfig {
        RunConfig {
            fleet: FleetConfig {
                count,
                dead_channel: dead,
                unresponsive,
                cooldowns,
                ..FleetConfig::default()
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn faults_are_triaged() {
        let cfg = small(5, 2, 1, 1);
        let (report, _) = run_fleet_with(&cfg, &RuleClassifier, &OracleAssessor, false).unwrap();
        let s = &report.cooldowns[0].summary;
        assert_eq!((s.failed_iqa, s.broken, s.working), (2, 1, 2));
        assert!(report.rows().all(|r| r.error.is_none()));
    }

    #[test]
    fn cooldowns_share_the_schema() {
        let cfg = small(2, 0, 0, 2);
        let (report, _) = run_fleet_with(&cfg, &RuleClassifier, &OracleAssessor, false).unwrap();
        assert_eq!(report.cooldowns.len(), 2);
        let csv = report.to_csv();
        assert_eq!(csv.lines().next().unwrap(), FLEET_CSV_HEADER);
        assert_eq!(csv.lines().count(), 5);
        let n = FLEET_CSV_HEADER.split(',').count();
        assert!(csv.lines().all(|l| l.split(',').count() == n));
    }
}
