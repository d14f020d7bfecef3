//! Run artifacts on disk and the independent audit of a run directory.
//!
//! A run directory holds `scenario.json`, `telemetry.csv`, `plans.json`,
//! `summary.json` and `timing.json`. Everything except `timing.json` is
//! byte-stable for a given scenario and seed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector3, Vector4, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{RigidBodyState, Wrench};
use crate::executive::{
    ControlMode, EventRecord, GlobalPlanRecord, InsertionRecord, LocalPlanRecord, RunSummary, ScenarioConfig, SimLog,
    TickRecord, Timings,
};
use crate::local_planner::LocalPlan;
use crate::validation::{check_local_plan, collision_at, PlanLimits};
use crate::world::{World, DEFAULT_RESOLUTION};

pub const TELEMETRY_FILE: &str = "telemetry.csv";
pub const PLANS_FILE: &str = "plans.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TIMING_FILE: &str = "timing.json";
pub const SCENARIO_FILE: &str = "scenario.json";

#[derive(Debug, Error)]
pub enum LogError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> LogError + '_ {
    move |source| LogError::Io {
        path: path.to_path_buf(),
        source,
    }
}

const STATE_COLS: [&str; 13] = [
    "px", "py", "pz", "qx", "qy", "qz", "qw", "vx", "vy", "vz", "wx", "wy", "wz",
];
const PARAM_COLS: [&str; 4] = ["m", "ixx", "iyy", "izz"];
const TRANS_COLS: [&str; 6] = ["px", "py", "pz", "vx", "vy", "vz"];
const WRENCH_COLS: [&str; 6] = ["fx", "fy", "fz", "tx", "ty", "tz"];

/// Column names in file order.
/// Columns before `mode` and `event`.
pub const NUMERIC_COLS: usize = 54;

pub fn telemetry_header() -> Vec<String> {
    let mut h = vec!["t_s".to_string()];
    h.extend(STATE_COLS.iter().map(|c| format!("truth_{c}")));
    h.extend(PARAM_COLS.iter().map(|c| format!("theta_{c}")));
    h.extend(PARAM_COLS.iter().map(|c| format!("sigma_{c}")));
    h.extend(PARAM_COLS.iter().map(|c| format!("gamma_{c}")));
    h.extend(PARAM_COLS.iter().map(|c| format!("fim_{c}")));
    h.extend(TRANS_COLS.iter().map(|c| format!("zbox_{c}")));
    h.extend(WRENCH_COLS.iter().map(|c| format!("u_{c}")));
    h.extend(TRANS_COLS.iter().map(|c| format!("est_{c}")));
    h.extend(TRANS_COLS.iter().map(|c| format!("z0_{c}")));
    h.push("mode".into());
    h.push("event".into());
    h
}

fn push_all(out: &mut Vec<String>, xs: impl IntoIterator<Item = f64>) {
    out.extend(xs.into_iter().map(|x| format!("{x:e}")));
}

fn row_fields(r: &TickRecord) -> Vec<String> {
    let mut f = Vec::with_capacity(NUMERIC_COLS + 2);
    push_all(&mut f, [r.t]);
    push_all(&mut f, r.truth.to_vector().iter().copied());
    push_all(&mut f, r.theta_hat.iter().copied());
    push_all(&mut f, r.sigma_theta.iter().copied());
    push_all(&mut f, r.gamma.iter().copied());
    push_all(&mut f, r.fim_diag.iter().copied());
    push_all(&mut f, r.z_box.iter().copied());
    push_all(&mut f, r.applied.force.iter().chain(r.applied.torque.iter()).copied());
    push_all(&mut f, r.estimate.iter().copied());
    push_all(&mut f, r.z0.iter().copied());
    f.push((r.mode as u8).to_string());
    f.push(r.events.join(";"));
    f
}

pub fn telemetry_csv(rows: &[TickRecord]) -> String {
    let header = telemetry_header();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# rattle telemetry v1; columns: {}; quaternion scalar last; mode 0 tube, 1 ancillary, 2 hold",
        header.join(" ")
    );
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).expect("in-memory write");
    for r in rows {
        w.write_record(row_fields(r)).expect("in-memory write");
    }
    out.push_str(&String::from_utf8(w.into_inner().expect("flush")).expect("utf8"));
    out
}

/// Parsed telemetry; `line` is the 1-based file line of each row.
#[derive(Clone, Debug)]
pub struct TelemetryRow {
    pub line: u64,
    pub record: TickRecord,
}

pub fn parse_telemetry(text: &str, path: &Path) -> Result<Vec<TelemetryRow>, LogError> {
    let perr = |line: u64, msg: String| LogError::Parse {
        path: path.to_path_buf(),
        msg: format!("line {line}: {msg}"),
    };
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(false)
        .from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| perr(e.position().map_or(0, |p| p.line()), e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != telemetry_header() {
        return Err(perr(2, "unexpected header".into()));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| perr(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |i: usize| -> Result<f64, LogError> {
            rec[i]
                .parse::<f64>()
                .map_err(|e| perr(line, format!("column {} ({}): {e}", i + 1, header[i])))
        };
        let vals: Vec<f64> = (0..NUMERIC_COLS).map(num).collect::<Result<_, _>>()?;
        let v4 = |o: usize| Vector4::new(vals[o], vals[o + 1], vals[o + 2], vals[o + 3]);
        let v6 = |o: usize| Vector6::from_fn(|i, _| vals[o + i]);
        let v3 = |o: usize| Vector3::new(vals[o], vals[o + 1], vals[o + 2]);
        let q = Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
        let truth = RigidBodyState {
            position: v3(1),
            // Kept as stored so the norm check sees what was written.
            attitude: UnitQuaternion::new_unchecked(q),
            velocity: v3(8),
            angular_velocity: v3(11),
        };
        let mode = match &rec[NUMERIC_COLS] {
            "0" => ControlMode::Tube,
            "1" => ControlMode::Ancillary,
            "2" => ControlMode::Hold,
            other => return Err(perr(line, format!("bad mode {other:?}"))),
        };
        let events = if rec[NUMERIC_COLS + 1].is_empty() {
            Vec::new()
        } else {
            rec[NUMERIC_COLS + 1].split(';').map(str::to_string).collect()
        };
        rows.push(TelemetryRow {
            line,
            record: TickRecord {
                t: vals[0],
                truth,
                theta_hat: v4(14),
                sigma_theta: v4(18),
                gamma: v4(22),
                fim_diag: v4(26),
                z_box: v6(30),
                applied: Wrench::new(v3(36), v3(39)),
                estimate: v6(42),
                z0: v6(48),
                mode,
                events,
            },
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlansFile {
    pub global: Vec<GlobalPlanRecord>,
    pub local: Vec<LocalPlanRecord>,
    pub insertions: Vec<InsertionRecord>,
    pub events: Vec<EventRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub period_s: Option<f64>,
    pub count: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

impl TimingStats {
    pub fn from_samples(period_s: Option<f64>, samples: &[f64]) -> Self {
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let pct = |p: f64| {
            if s.is_empty() {
                0.0
            } else {
                s[((p * (s.len() - 1) as f64).round() as usize).min(s.len() - 1)]
            }
        };
        Self {
            period_s,
            count: s.len(),
            mean_ms: if s.is_empty() { 0.0 } else { s.iter().sum::<f64>() / s.len() as f64 },
            p50_ms: pct(0.5),
            p95_ms: pct(0.95),
            max_ms: s.last().copied().unwrap_or(0.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub global_planner: TimingStats,
    pub local_planner: TimingStats,
    pub mrpi_update: TimingStats,
    pub controller: TimingStats,
    pub estimator: TimingStats,
}

impl TimingReport {
    pub fn new(cfg: &ScenarioConfig, t: &Timings) -> Self {
        Self {
            global_planner: TimingStats::from_samples(None, &t.global_ms),
            local_planner: TimingStats::from_samples(Some(cfg.periods.local_s), &t.local_ms),
            mrpi_update: TimingStats::from_samples(Some(cfg.periods.local_s), &t.mrpi_ms),
            controller: TimingStats::from_samples(Some(cfg.periods.control_s), &t.control_ms),
            estimator: TimingStats::from_samples(Some(cfg.periods.control_s), &t.estimator_ms),
        }
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "{:<16} {:>9} {:>7} {:>10} {:>10} {:>10}\n",
            "component", "period s", "count", "p50 ms", "p95 ms", "max ms"
        );
        for (name, t) in [
            ("global planner", &self.global_planner),
            ("local planner", &self.local_planner),
            ("mrpi update", &self.mrpi_update),
            ("controller", &self.controller),
            ("estimator", &self.estimator),
        ] {
            let period = t.period_s.map_or("on event".to_string(), |p| format!("{p}"));
            let _ = writeln!(
                s,
                "{name:<16} {period:>9} {:>7} {:>10.3} {:>10.3} {:>10.3}",
                t.count, t.p50_ms, t.p95_ms, t.max_ms
            );
        }
        s
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn write(path: &Path, text: &str) -> Result<(), LogError> {
    fs::write(path, text).map_err(io_err(path))
}

/// Writes every artifact of `log` into `dir` (created if missing).
pub fn write_run(log: &SimLog, dir: &Path) -> Result<RunSummary, LogError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write(&dir.join(SCENARIO_FILE), &to_json(&log.config))?;
    write(&dir.join(TELEMETRY_FILE), &telemetry_csv(&log.rows))?;
    let plans = PlansFile {
        global: log.global_plans.clone(),
        local: log.local_plans.clone(),
        insertions: log.insertions.clone(),
        events: log.events.clone(),
    };
    write(&dir.join(PLANS_FILE), &to_json(&plans))?;
    let summary = log.summary();
    write(&dir.join(SUMMARY_FILE), &to_json(&summary))?;
    write(&dir.join(TIMING_FILE), &to_json(&TimingReport::new(&log.config, &log.timings)))?;
    Ok(summary)
}

fn read(path: &Path) -> Result<String, LogError> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, LogError> {
    let text = read(path)?;
    serde_json::from_str(&text).map_err(|e| LogError::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub fn read_summary(dir: &Path) -> Result<RunSummary, LogError> {
    read_json(&dir.join(SUMMARY_FILE))
}

/// One named check and its first failure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub checked: usize,
    pub first_failure: Option<(f64, String)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckOutcome>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.first_failure.is_none())
    }

    /// Earliest failing timestamp over all checks.
    pub fn first_failure(&self) -> Option<(f64, &str, &str)> {
        self.checks
            .iter()
            .filter_map(|c| c.first_failure.as_ref().map(|(t, m)| (*t, c.name.as_str(), m.as_str())))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            match &c.first_failure {
                None => {
                    let _ = writeln!(s, "PASS {:<22} ({} checked)", c.name, c.checked);
                }
                Some((t, m)) => {
                    let _ = writeln!(s, "FAIL {:<22} first at t = {t} s: {m}", c.name);
                }
            }
        }
        s
    }
}

struct Check {
    name: &'static str,
    checked: usize,
    first: Option<(f64, String)>,
}

impl Check {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            checked: 0,
            first: None,
        }
    }

    fn record(&mut self, t: f64, ok: bool, msg: impl FnOnce() -> String) {
        self.checked += 1;
        if !ok && self.first.is_none() {
            self.first = Some((t, msg()));
        }
    }

    fn done(self) -> CheckOutcome {
        CheckOutcome {
            name: self.name.to_string(),
            checked: self.checked,
            first_failure: self.first,
        }
    }
}

fn world_at(cfg: &ScenarioConfig, insertions: &[InsertionRecord], t: f64) -> Option<World> {
    let mut spec = cfg.world.clone();
    for ins in insertions {
        if ins.accepted && ins.t <= t {
            spec.obstacles.push(ins.obstacle.clone());
        }
    }
    spec.build().ok()
}

/// Re-checks a run directory: timestamps, quaternion norms, truth-state
/// collisions, actuator limits, tube containment and every adopted plan.
pub fn validate_run(dir: &Path) -> Result<ValidationReport, LogError> {
    let cfg_path = dir.join(SCENARIO_FILE);
    let cfg_text = read(&cfg_path)?;
    let cfg: ScenarioConfig = serde_json::from_str(&cfg_text).map_err(|e| LogError::Parse {
        path: cfg_path.clone(),
        msg: e.to_string(),
    })?;
    let tel_path = dir.join(TELEMETRY_FILE);
    let rows = parse_telemetry(&read(&tel_path)?, &tel_path)?;
    let plans: PlansFile = read_json(&dir.join(PLANS_FILE))?;
    Ok(validate_records(&cfg, &rows, &plans))
}

pub fn validate_records(cfg: &ScenarioConfig, rows: &[TelemetryRow], plans: &PlansFile) -> ValidationReport {
    let mut time = Check::new("timestamps");
    let mut quat = Check::new("quaternion_norm");
    let mut coll = Check::new("collision");
    let mut act = Check::new("actuator_limits");
    let mut tube = Check::new("tube_containment");
    let mut dynamics = Check::new("plan_dynamics");
    let mut free = Check::new("plan_free_and_bounded");

    let mut last_t = f64::NEG_INFINITY;
    for row in rows {
        let r = &row.record;
        time.record(r.t, r.t > last_t, || format!("line {}: {} after {}", row.line, r.t, last_t));
        last_t = r.t;
        let qn = r.truth.attitude.as_ref().norm();
        quat.record(r.t, (qn - 1.0).abs() <= 1e-9, || format!("line {}: |q| = {qn}", row.line));
        let hit = match world_at(cfg, &plans.insertions, r.t) {
            Some(w) => collision_at(&w, &r.truth.position),
            None => Some("world does not build".into()),
        };
        coll.record(r.t, hit.is_none(), || format!("line {}: {}", row.line, hit.clone().unwrap_or_default()));
        let fm = cfg.actuators.force_max_n * (1.0 + 1e-12);
        let tm = cfg.actuators.torque_max_nm * (1.0 + 1e-12);
        let ok = r.applied.force.iter().all(|f| f.abs() <= fm) && r.applied.torque.iter().all(|f| f.abs() <= tm);
        act.record(r.t, ok, || format!("line {}: wrench outside actuator box", row.line));
        if r.mode != ControlMode::Ancillary {
            let worst = (0..6)
                .map(|i| (r.estimate[i] - r.z0[i]).abs() / r.z_box[i])
                .fold(0.0, f64::max);
            tube.record(r.t, worst <= 1.0 + 1e-9, || format!("line {}: |x - z0| / Z = {worst}", row.line));
        }
    }

    let limits = PlanLimits {
        force_max: cfg.planner.local_force_max_n,
        torque_max: cfg.planner.local_torque_max_nm,
        resolution: DEFAULT_RESOLUTION,
    };
    for rec in plans.local.iter().filter(|r| r.adopted) {
        let Some(plan) = &rec.plan else {
            dynamics.record(rec.t, false, || "adopted plan missing".into());
            continue;
        };
        let check = world_at(cfg, &plans.insertions, rec.t).map(|w| check_local_plan(plan, &rec.params, &w, &limits));
        match check {
            Some(c) => {
                dynamics.record(rec.t, c.max_dynamics_error <= 1e-6, || {
                    format!("replay error {:e}", c.max_dynamics_error)
                });
                let other: Vec<&String> = c.failures.iter().filter(|f| !f.contains("replay")).collect();
                free.record(rec.t, other.is_empty(), || format!("{other:?}"));
            }
            None => free.record(rec.t, false, || "world does not build".into()),
        }
    }
    ValidationReport {
        checks: vec![
            time.done(),
            quat.done(),
            coll.done(),
            act.done(),
            tube.done(),
            dynamics.done(),
            free.done(),
        ],
    }
}

/// Convenience for tests and tools: the adopted local plans of a run.
pub fn adopted_plans(plans: &PlansFile) -> impl Iterator<Item = (&LocalPlanRecord, &LocalPlan)> {
    plans.local.iter().filter(|r| r.adopted).filter_map(|r| r.plan.as_ref().map(|p| (r, p)))
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Content hash in git's object format: `sha256("blob <len>\0" ++ bytes)`.
pub fn git_style_hash(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub scenario_path: String,
    pub seed: u64,
    pub out_dir: String,
    pub config_hash: String,
}

impl RunManifest {
    pub fn new(scenario_path: &Path, scenario_bytes: &[u8], seed: u64, out_dir: &Path) -> Self {
        Self {
            scenario_path: scenario_path.display().to_string(),
            seed,
            out_dir: out_dir.display().to_string(),
            config_hash: git_style_hash(scenario_bytes),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), LogError> {
        write(&dir.join(MANIFEST_FILE), &to_json(self))
    }
}
