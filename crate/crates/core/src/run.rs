//! Planning and executing verification runs.
//!
//! A run lives in `<store_root>/runs/<run_id>/`:
//!
//! ```text
//! manifest.json   what the in-environment runner should execute
//! result.json     written by the runner
//! record.json     durable history entry, always written
//! output.log      combined stdout/stderr of the runner
//! workdir/        cwd of the runner
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{self, ErrorKind, Read, Write};
use std::os::unix::fs::PermissionsExt;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::env::{self, EnvId, EnvRecord};
use crate::error::{Error, IoContext, Result};
use crate::process::{self, Watchdog};
use crate::registry::{self, AssetId, AssetKind, AssetRecord};
use crate::store::{self, Store};

pub const RUN_DIR_VAR: &str = "SAUCER_RUN_DIR";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const RESULT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
}

impl ParamValue {
    /// Interprets a command-line value: booleans, then numbers, then strings.
    pub fn parse_cli(raw: &str) -> Self {
        match raw {
            "true" => return ParamValue::Bool(true),
            "false" => return ParamValue::Bool(false),
            _ => {}
        }
        if let Ok(i) = raw.parse::<i64>() {
            return ParamValue::Int(i);
        }
        match raw.parse::<f64>() {
            Ok(f) if f.is_finite() && raw.bytes().any(|b| b.is_ascii_digit()) => {
                ParamValue::Float(f)
            }
            _ => ParamValue::Str(raw.to_owned()),
        }
    }
}

pub type Params = BTreeMap<String, ParamValue>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub schema_version: u32,
    pub run_id: String,
    pub model_load_script: PathBuf,
    pub dataset_load_script: PathBuf,
    pub verification_script: PathBuf,
    pub params: Params,
    pub workdir: PathBuf,
    pub result_path: PathBuf,
}

impl RunManifest {
    pub fn run_dir(&self) -> &Path {
        self.workdir
            .parent()
            .expect("workdir lives inside the run directory")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.run_dir().join("manifest.json")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Error,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::Error => "error",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    ModelLoad,
    DatasetLoad,
    Verification,
}

impl Stage {
    pub const ORDER: [Stage; 3] = [Stage::ModelLoad, Stage::DatasetLoad, Stage::Verification];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunResult {
    pub schema_version: u32,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<Stage>,
    pub stage_timings: BTreeMap<Stage, f64>,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub messages: Vec<String>,
}

impl RunResult {
    fn check(&self) -> std::result::Result<(), String> {
        if self.schema_version != RESULT_SCHEMA_VERSION {
            return Err(format!(
                "schema_version: expected {RESULT_SCHEMA_VERSION}, got {}",
                self.schema_version
            ));
        }
        for (stage, secs) in &self.stage_timings {
            if !secs.is_finite() || *secs < 0.0 {
                return Err(format!(
                    "stage_timings.{}: must be a finite nonnegative number",
                    stage_name(*stage)
                ));
            }
        }
        for (label, value) in &self.metrics {
            if !value.is_finite() {
                return Err(format!("metrics.{label}: must be finite"));
            }
        }
        match (self.verdict, self.failed_stage) {
            (Verdict::Error, None) => {
                Err("failed_stage: required when verdict is \"error\"".into())
            }
            (Verdict::Pass | Verdict::Fail, Some(_)) => Err(format!(
                "failed_stage: must be absent when verdict is \"{}\"",
                self.verdict
            )),
            (Verdict::Pass | Verdict::Fail, None) => {
                match Stage::ORDER
                    .iter()
                    .find(|s| !self.stage_timings.contains_key(s))
                {
                    Some(missing) => Err(format!(
                        "stage_timings.{}: required when verdict is \"{}\"",
                        stage_name(*missing),
                        self.verdict
                    )),
                    None => Ok(()),
                }
            }
            (Verdict::Error, Some(_)) => Ok(()),
        }
    }
}

fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::ModelLoad => "model_load",
        Stage::DatasetLoad => "dataset_load",
        Stage::Verification => "verification",
    }
}

/// Strictly parses a result document.
pub fn parse_result(bytes: &[u8]) -> Result<RunResult> {
    let result: RunResult =
        serde_json::from_slice(bytes).map_err(|e| Error::InvalidResult(e.to_string()))?;
    result.check().map_err(Error::InvalidResult)?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssetSnapshot {
    pub model_load: AssetRecord,
    pub dataset_load: AssetRecord,
    pub verification: AssetRecord,
    pub env_setup: AssetRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunnerErrorKind {
    /// The interpreter could not be started.
    Spawn,
    Timeout,
    /// Nonzero exit status.
    Exit,
    /// Exit 0 but the result file was missing or malformed.
    InvalidResult,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunnerError {
    pub kind: RunnerErrorKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub manifest: RunManifest,
    pub result: Option<RunResult>,
    pub runner_exit_code: i32,
    pub runner_error: Option<RunnerError>,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub output_log: PathBuf,
    pub env_id: EnvId,
    pub asset_snapshot: AssetSnapshot,
}

/// Classification of a finished run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunOutcome {
    Pass,
    Fail,
    /// A functional script raised; the runner itself was fine.
    StageError,
    /// The interpreter could not be launched.
    SpawnFailure,
    RunnerFailure,
}

impl RunRecord {
    pub fn outcome(&self) -> RunOutcome {
        match (&self.runner_error, &self.result) {
            (Some(e), _) if e.kind == RunnerErrorKind::Spawn => RunOutcome::SpawnFailure,
            (Some(_), _) | (None, None) => RunOutcome::RunnerFailure,
            (None, Some(_)) if self.runner_exit_code != 0 => RunOutcome::RunnerFailure,
            (None, Some(r)) => match r.verdict {
                Verdict::Pass => RunOutcome::Pass,
                Verdict::Fail => RunOutcome::Fail,
                Verdict::Error => RunOutcome::StageError,
            },
        }
    }

    pub fn run_id(&self) -> &str {
        &self.manifest.run_id
    }
}

impl fmt::Display for RunOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunOutcome::Pass => "pass",
            RunOutcome::Fail => "fail",
            RunOutcome::StageError => "error",
            RunOutcome::SpawnFailure => "spawn-failure",
            RunOutcome::RunnerFailure => "runner-failure",
        })
    }
}

/// A planned run: manifest on disk, environment ready.
#[derive(Debug, Clone)]
pub struct PlannedRun {
    pub manifest: RunManifest,
    pub env: EnvRecord,
    pub snapshot: AssetSnapshot,
}

pub fn new_run_id() -> String {
    format!(
        "{}-{}",
        Utc::now().format("%Y%m%dT%H%M%SZ"),
        store::random_hex(6)
    )
}

fn is_run_id(s: &str) -> bool {
    let Some((stamp, suffix)) = s.split_once('-') else {
        return false;
    };
    stamp.len() == 16
        && chrono::NaiveDateTime::parse_from_str(stamp, "%Y%m%dT%H%M%SZ").is_ok()
        && store::is_lower_hex(suffix, 6)
}

fn verify_hash(rec: &AssetRecord) -> Result<()> {
    let actual = store::sha256_hex(&rec.read_bytes()?);
    if actual != rec.content_hash {
        return Err(Error::HashMismatch {
            name: rec.name.clone(),
            expected: rec.content_hash.clone(),
            actual,
        });
    }
    Ok(())
}

/// Validates the selection, readies its environment and writes the manifest.
pub fn plan_run(
    store: &Store,
    model_id: &AssetId,
    dataset_id: &AssetId,
    verif_id: &AssetId,
    params: Params,
    strict_hash: bool,
) -> Result<PlannedRun> {
    let reg = registry::load_registry(store.root())?;
    let env_setup_id = registry::validate_selection(&reg, model_id, dataset_id, verif_id)?;
    let lookup = |id: &AssetId| reg.get(id).cloned().expect("validated");
    let snapshot = AssetSnapshot {
        model_load: lookup(model_id),
        dataset_load: lookup(dataset_id),
        verification: lookup(verif_id),
        env_setup: lookup(&env_setup_id),
    };
    for rec in [
        &snapshot.model_load,
        &snapshot.dataset_load,
        &snapshot.verification,
        &snapshot.env_setup,
    ] {
        if let Err(source) = File::open(&rec.path) {
            return Err(Error::FileNotReadable {
                path: rec.path.clone(),
                source,
            });
        }
        if strict_hash {
            verify_hash(rec)?;
        }
    }

    let env = env::ensure_ready(store, &snapshot.env_setup)?;

    let runs = store.runs_dir();
    store.ensure_dir(&runs)?;
    let (run_id, run_dir) = loop {
        let id = new_run_id();
        let dir = runs.join(&id);
        match fs::create_dir(&dir) {
            Ok(()) => break (id, dir),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(format!("creating {}", dir.display()), e)),
        }
    };
    let workdir = run_dir.join("workdir");
    fs::create_dir(&workdir).context(|| format!("creating {}", workdir.display()))?;

    let manifest = RunManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        run_id,
        model_load_script: snapshot.model_load.path.clone(),
        dataset_load_script: snapshot.dataset_load.path.clone(),
        verification_script: snapshot.verification.path.clone(),
        params,
        workdir,
        result_path: run_dir.join("result.json"),
    };
    let mut json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    json.push(b'\n');
    store::atomic_write(&manifest.manifest_path(), &json)?;
    Ok(PlannedRun {
        manifest,
        env,
        snapshot,
    })
}

fn check_interpreter(path: Option<&Path>) -> std::result::Result<PathBuf, String> {
    let path = path.ok_or("environment is not ready")?;
    let meta = fs::metadata(path).map_err(|e| e.to_string())?;
    if !meta.is_file() || meta.permissions().mode() & 0o111 == 0 {
        return Err("not an executable file".into());
    }
    Ok(path.to_path_buf())
}

/// Copies `src` to both sinks until EOF.
fn tee(mut src: impl Read, console: &mut dyn Write, log: &mut File) -> io::Result<()> {
    let mut buf = [0u8; 8192];
    loop {
        let n = match src.read(&mut buf) {
            Ok(0) => return Ok(()),
            Ok(n) => n,
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        };
        log.write_all(&buf[..n])?;
        // a closed console must not stop the capture
        if console.write_all(&buf[..n]).is_ok() {
            let _ = console.flush();
        }
    }
}

/// Runs the shim inside the environment and persists the run record.
///
/// Output is streamed to `console` and captured to `output.log`. The record
/// is written whatever the outcome; runner-level failures are returned as
/// errors after it has been persisted.
pub fn execute_run(
    plan: &PlannedRun,
    shim_path: &Path,
    timeout: Option<Duration>,
    console: &mut dyn Write,
) -> Result<RunRecord> {
    let manifest = &plan.manifest;
    let run_dir = manifest.run_dir().to_path_buf();
    let output_log = run_dir.join("output.log");
    let mut log =
        File::create(&output_log).context(|| format!("creating {}", output_log.display()))?;
    let started_at = Utc::now();

    let mut record = RunRecord {
        manifest: manifest.clone(),
        result: None,
        runner_exit_code: 0,
        runner_error: None,
        started_at,
        finished_at: started_at,
        output_log: output_log.clone(),
        env_id: plan.env.env_id.clone(),
        asset_snapshot: plan.snapshot.clone(),
    };

    let spawned = check_interpreter(plan.env.interpreter.as_deref()).and_then(|interp| {
        let (reader, writer) = io::pipe().map_err(|e| e.to_string())?;
        let writer_err = writer.try_clone().map_err(|e| e.to_string())?;
        let child = Command::new(&interp)
            .arg(shim_path)
            .arg(manifest.manifest_path())
            .current_dir(&manifest.workdir)
            .env(RUN_DIR_VAR, &run_dir)
            .stdin(Stdio::null())
            .stdout(writer)
            .stderr(writer_err)
            .process_group(0)
            .spawn()
            .map_err(|e| e.to_string())?;
        // the Command (and with it our copies of the write end) is gone here
        Ok((interp, child, reader))
    });

    let (interp, mut child, reader) = match spawned {
        Ok(parts) => parts,
        Err(reason) => {
            let path = plan.env.interpreter.clone().unwrap_or_default();
            record.runner_exit_code = 127;
            record.runner_error = Some(RunnerError {
                kind: RunnerErrorKind::Spawn,
                message: format!("cannot spawn {}: {reason}", path.display()),
            });
            record.finished_at = Utc::now();
            persist_record(&record)?;
            return Err(Error::SpawnError { path, reason });
        }
    };

    let watchdog = timeout.map(|t| Watchdog::arm(child.id(), t));
    let streamed = tee(reader, console, &mut log);
    let status = child.wait();
    let timed_out = watchdog.map(Watchdog::disarm).unwrap_or(false);
    record.finished_at = Utc::now();

    let status = status.context(|| format!("waiting for {}", interp.display()))?;
    record.runner_exit_code = process::exit_code(status);
    let _ = log.flush();

    let parsed = match fs::read(&manifest.result_path) {
        Ok(bytes) => parse_result(&bytes).map_err(|e| e.to_string()),
        Err(e) if e.kind() == ErrorKind::NotFound => Err("result file not written".to_owned()),
        Err(e) => Err(format!("result file unreadable: {e}")),
    };
    let result_problem = match parsed {
        Ok(r) => {
            record.result = Some(r);
            None
        }
        Err(msg) => Some(msg),
    };

    record.runner_error = if timed_out {
        Some(RunnerError {
            kind: RunnerErrorKind::Timeout,
            message: format!(
                "runner exceeded timeout of {}s",
                timeout.unwrap_or_default().as_secs_f64()
            ),
        })
    } else if record.runner_exit_code != 0 {
        let mut message = format!("runner exited with code {}", record.runner_exit_code);
        if let Some(p) = &result_problem {
            message.push_str(&format!("; {p}"));
        }
        Some(RunnerError {
            kind: RunnerErrorKind::Exit,
            message,
        })
    } else {
        result_problem.map(|message| RunnerError {
            kind: RunnerErrorKind::InvalidResult,
            message,
        })
    };
    if let Err(e) = streamed {
        let note = format!("output capture failed: {e}");
        match &mut record.runner_error {
            Some(err) => err.message.push_str(&format!("; {note}")),
            None => {
                if let Some(r) = &mut record.result {
                    r.messages.push(note);
                }
            }
        }
    }

    persist_record(&record)?;
    match &record.runner_error {
        Some(err) => Err(Error::RunnerFailure {
            run_id: manifest.run_id.clone(),
            reason: err.message.clone(),
        }),
        None => Ok(record),
    }
}

fn persist_record(record: &RunRecord) -> Result<()> {
    let path = record.manifest.run_dir().join("record.json");
    let mut json = serde_json::to_vec_pretty(record).expect("record serializes");
    json.push(b'\n');
    store::atomic_write(&path, &json)
}

/// One line of run history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub outcome: String,
    pub verdict: Option<Verdict>,
    pub env_id: EnvId,
    pub model_load: String,
    pub dataset_load: String,
    pub verification: String,
}

impl From<&RunRecord> for RunSummary {
    fn from(r: &RunRecord) -> Self {
        RunSummary {
            run_id: r.manifest.run_id.clone(),
            started_at: r.started_at,
            finished_at: r.finished_at,
            outcome: r.outcome().to_string(),
            verdict: r.result.as_ref().map(|res| res.verdict),
            env_id: r.env_id.clone(),
            model_load: r.asset_snapshot.model_load.name.clone(),
            dataset_load: r.asset_snapshot.dataset_load.name.clone(),
            verification: r.asset_snapshot.verification.name.clone(),
        }
    }
}

/// Completed runs, newest first. Planned-but-unexecuted runs are skipped.
pub fn list_history(store: &Store) -> Result<Vec<RunSummary>> {
    let dir = store.runs_dir();
    let entries = match fs::read_dir(&dir) {
        Ok(e) => e,
        Err(e) if e.kind() == ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(format!("reading {}", dir.display()), e)),
    };
    let mut out: Vec<RunSummary> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| fs::read(e.path().join("record.json")).ok())
        .filter_map(|bytes| serde_json::from_slice::<RunRecord>(&bytes).ok())
        .map(|r| RunSummary::from(&r))
        .collect();
    out.sort_by(|a, b| (b.started_at, &b.run_id).cmp(&(a.started_at, &a.run_id)));
    Ok(out)
}

pub fn show_run(store: &Store, run_id: &str) -> Result<RunRecord> {
    if !is_run_id(run_id) {
        return Err(Error::UnknownRun(run_id.to_owned()));
    }
    let path = store.runs_dir().join(run_id).join("record.json");
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == ErrorKind::NotFound => {
            return Err(Error::UnknownRun(run_id.to_owned()))
        }
        Err(e) => return Err(Error::io(format!("reading {}", path.display()), e)),
    };
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::io(format!("parsing {}", path.display()), io::Error::other(e)))
}

/// Resolves a selection by name or id and plans the run.
pub fn plan_run_by_reference(
    store: &Store,
    model: &str,
    dataset: &str,
    verification: &str,
    params: Params,
    strict_hash: bool,
) -> Result<PlannedRun> {
    let reg = registry::load_registry(store.root())?;
    let m = reg.resolve(model, &[AssetKind::ModelLoad])?.id.clone();
    let d = reg.resolve(dataset, &[AssetKind::DatasetLoad])?.id.clone();
    let v = reg
        .resolve(verification, &[AssetKind::Verification])?
        .id
        .clone();
    plan_run(store, &m, &d, &v, params, strict_hash)
}
