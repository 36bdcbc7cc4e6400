//! Content-addressed environments built by environment-setup scripts.
//!
//! A setup script is invoked as `sh <script> <env_root>` with
//! `SAUCER_ENV_ROOT=<env_root>`. It succeeds when it exits 0 and leaves an
//! `<env_root>/interpreter` file holding one absolute path to an executable.
//! While the script runs, `<env_root>/.provisioning` marks the directory as
//! in progress, so a half-built environment is never reported as Ready.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::os::unix::fs::PermissionsExt;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::process;
use crate::registry::{AssetKind, AssetRecord, Registry};
use crate::store::{self, Store};

pub const ENV_ROOT_VAR: &str = "SAUCER_ENV_ROOT";

const INTERPRETER_MARKER: &str = "interpreter";
const PROVISIONING_SENTINEL: &str = ".provisioning";
const RECORD_FILE: &str = ".env-record.json";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EnvId(String);

impl EnvId {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Accepts only well-formed ids (12 lowercase hex chars).
    pub fn parse(s: &str) -> Option<Self> {
        store::is_lower_hex(s, 12).then(|| EnvId(s.to_owned()))
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// First 12 hex chars of the SHA-256 of the setup script.
pub fn env_id_for(script_bytes: &[u8]) -> EnvId {
    let mut h = store::sha256_hex(script_bytes);
    h.truncate(12);
    EnvId(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvState {
    Absent,
    Provisioning,
    Ready,
    Failed,
}

impl fmt::Display for EnvState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvState::Absent => "absent",
            EnvState::Provisioning => "provisioning",
            EnvState::Ready => "ready",
            EnvState::Failed => "failed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvRecord {
    pub env_id: EnvId,
    pub root: PathBuf,
    pub state: EnvState,
    pub interpreter: Option<PathBuf>,
    pub provisioned_at: Option<DateTime<Utc>>,
    pub log_path: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct ReadyStamp {
    provisioned_at: DateTime<Utc>,
}

struct EnvPaths {
    root: PathBuf,
    log: PathBuf,
    lock: PathBuf,
}

fn paths(store: &Store, id: &EnvId) -> EnvPaths {
    let envs = store.envs_dir();
    EnvPaths {
        root: envs.join(id.as_str()),
        log: envs.join(format!("{id}.log")),
        lock: envs.join(format!("{id}.lock")),
    }
}

/// Reads and validates `<root>/interpreter`.
fn read_interpreter(root: &Path) -> std::result::Result<PathBuf, String> {
    let marker = root.join(INTERPRETER_MARKER);
    let text = fs::read_to_string(&marker)
        .map_err(|e| format!("interpreter marker {} unreadable: {e}", marker.display()))?;
    let line = text.strip_suffix('\n').unwrap_or(&text);
    let line = line.strip_suffix('\r').unwrap_or(line);
    if line.is_empty() || line.contains('\n') {
        return Err("interpreter marker must hold exactly one line".into());
    }
    let path = PathBuf::from(line);
    if !path.is_absolute() {
        return Err(format!("interpreter path '{line}' is not absolute"));
    }
    let meta = fs::metadata(&path).map_err(|e| format!("interpreter {line}: {e}"))?;
    if !meta.is_file() || meta.permissions().mode() & 0o111 == 0 {
        return Err(format!("interpreter {line} is not an executable file"));
    }
    Ok(path)
}

fn failed_dirs(store: &Store, id: &EnvId) -> Vec<PathBuf> {
    let prefix = format!("{id}.failed-");
    let Ok(entries) = fs::read_dir(store.envs_dir()) else {
        return Vec::new();
    };
    let mut out: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with(&prefix))
        .map(|e| e.path())
        .collect();
    out.sort();
    out
}

/// Current on-disk state. Lock-free.
pub fn env_status(store: &Store, env_id: &EnvId) -> EnvState {
    env_record(store, env_id).state
}

pub fn env_record(store: &Store, env_id: &EnvId) -> EnvRecord {
    let p = paths(store, env_id);
    let mut rec = EnvRecord {
        env_id: env_id.clone(),
        root: p.root.clone(),
        state: EnvState::Absent,
        interpreter: None,
        provisioned_at: None,
        log_path: p.log,
    };
    if p.root.is_dir() {
        if p.root.join(PROVISIONING_SENTINEL).exists() {
            rec.state = EnvState::Provisioning;
        } else if let Ok(interp) = read_interpreter(&p.root) {
            rec.state = EnvState::Ready;
            rec.interpreter = Some(interp);
            rec.provisioned_at = fs::read(p.root.join(RECORD_FILE))
                .ok()
                .and_then(|b| serde_json::from_slice::<ReadyStamp>(&b).ok())
                .map(|s| s.provisioned_at);
        } else {
            rec.state = EnvState::Failed;
        }
    } else if !failed_dirs(store, env_id).is_empty() {
        rec.state = EnvState::Failed;
    }
    rec
}

fn setup_script_bytes(env_setup: &AssetRecord) -> Result<Vec<u8>> {
    if env_setup.kind != AssetKind::EnvSetup {
        return Err(Error::KindMismatch(format!(
            "'{}' is a {} asset, not env-setup",
            env_setup.name, env_setup.kind
        )));
    }
    env_setup.read_bytes()
}

fn lock_env(store: &Store, id: &EnvId) -> Result<store::LockGuard> {
    let lock = paths(store, id).lock;
    store::acquire_lock(&lock, store.provision_timeout + store.lock_timeout)?
        .ok_or(Error::LockTimeout(lock))
}

/// Runs the setup script unconditionally, replacing any existing environment.
pub fn provision(store: &Store, env_setup: &AssetRecord) -> Result<EnvRecord> {
    let id = env_id_for(&setup_script_bytes(env_setup)?);
    let _guard = lock_env(store, &id)?;
    provision_locked(store, env_setup, &id)
}

/// Returns the Ready environment for the script's current bytes, provisioning
/// it at most once across concurrent callers.
pub fn ensure_ready(store: &Store, env_setup: &AssetRecord) -> Result<EnvRecord> {
    let id = env_id_for(&setup_script_bytes(env_setup)?);
    let rec = env_record(store, &id);
    if rec.state == EnvState::Ready {
        return Ok(rec);
    }
    let _guard = lock_env(store, &id)?;
    let rec = env_record(store, &id);
    if rec.state == EnvState::Ready {
        return Ok(rec);
    }
    provision_locked(store, env_setup, &id)
}

fn provision_locked(store: &Store, env_setup: &AssetRecord, id: &EnvId) -> Result<EnvRecord> {
    let p = paths(store, id);
    store.ensure_dir(&store.envs_dir())?;
    if p.root.exists() {
        fs::remove_dir_all(&p.root).context(|| format!("clearing {}", p.root.display()))?;
    }
    fs::create_dir(&p.root).context(|| format!("creating {}", p.root.display()))?;
    File::create(p.root.join(PROVISIONING_SENTINEL))
        .context(|| format!("marking {} in progress", p.root.display()))?;

    let outcome = run_setup_script(&env_setup.path, &p, store.provision_timeout);
    let outcome = outcome.and_then(|()| read_interpreter(&p.root));

    match outcome {
        Ok(interpreter) => {
            let provisioned_at = Utc::now();
            let stamp = serde_json::to_vec(&ReadyStamp { provisioned_at }).expect("serializes");
            fs::write(p.root.join(RECORD_FILE), stamp)
                .context(|| format!("writing env record in {}", p.root.display()))?;
            fs::remove_file(p.root.join(PROVISIONING_SENTINEL))
                .context(|| format!("finalizing {}", p.root.display()))?;
            Ok(EnvRecord {
                env_id: id.clone(),
                root: p.root,
                state: EnvState::Ready,
                interpreter: Some(interpreter),
                provisioned_at: Some(provisioned_at),
                log_path: p.log,
            })
        }
        Err(reason) => {
            let _ = fs::remove_file(p.root.join(PROVISIONING_SENTINEL));
            let stamp = Utc::now().format("%Y%m%dT%H%M%S%6fZ");
            let failed = store.envs_dir().join(format!("{id}.failed-{stamp}"));
            let _ = fs::rename(&p.root, &failed);
            Err(Error::ProvisionFailed {
                env_id: id.to_string(),
                reason,
                log: p.log,
            })
        }
    }
}

fn run_setup_script(
    script: &Path,
    p: &EnvPaths,
    timeout: Duration,
) -> std::result::Result<(), String> {
    let log = File::create(&p.log).map_err(|e| format!("creating log: {e}"))?;
    let log_err = log.try_clone().map_err(|e| format!("creating log: {e}"))?;
    let mut child = Command::new("sh")
        .arg(script)
        .arg(&p.root)
        .env(ENV_ROOT_VAR, &p.root)
        .stdin(Stdio::null())
        .stdout(log)
        .stderr(log_err)
        .process_group(0)
        .spawn()
        .map_err(|e| format!("spawning sh: {e}"))?;
    let (status, timed_out) = process::wait_with_timeout(&mut child, Some(timeout))
        .map_err(|e| format!("waiting for setup script: {e}"))?;
    if timed_out {
        return Err(format!(
            "setup script timed out after {}s",
            timeout.as_secs_f64()
        ));
    }
    if !status.success() {
        return Err(format!(
            "setup script exited with code {}",
            process::exit_code(status)
        ));
    }
    Ok(())
}

/// Environment ids currently present on disk.
pub fn list_env_ids(store: &Store) -> Vec<EnvId> {
    let Ok(entries) = fs::read_dir(store.envs_dir()) else {
        return Vec::new();
    };
    let ids: BTreeSet<EnvId> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            let stem = name.split('.').next().unwrap_or_default().to_owned();
            let is_env = e.path().is_dir() || name.ends_with(".log");
            is_env.then(|| EnvId::parse(&stem)).flatten()
        })
        .collect();
    ids.into_iter().collect()
}

/// The environment id each env-setup asset currently maps to.
///
/// Uses the file's present bytes; falls back to the registered hash when the
/// file is gone.
pub fn current_env_id(asset: &AssetRecord) -> EnvId {
    match asset.read_bytes() {
        Ok(bytes) => env_id_for(&bytes),
        Err(_) => EnvId(asset.content_hash[..12].to_owned()),
    }
}

/// Removes Ready/Failed environments no registered env-setup asset maps to.
pub fn gc(store: &Store, registry: &Registry) -> Result<Vec<EnvId>> {
    let lock_path = store.registry_lock_path();
    let _registry_guard = store::acquire_lock(&lock_path, store.lock_timeout)?
        .ok_or(Error::StoreLocked(lock_path))?;

    let live: HashSet<EnvId> = registry
        .assets
        .iter()
        .filter(|a| a.kind == AssetKind::EnvSetup)
        .map(current_env_id)
        .collect();

    let mut removed = Vec::new();
    for id in list_env_ids(store) {
        if live.contains(&id) {
            continue;
        }
        // an in-flight provisioning holds the env lock; leave it alone
        let Some(_guard) = store::acquire_lock(&paths(store, &id).lock, Duration::ZERO)? else {
            continue;
        };
        let rec = env_record(store, &id);
        if !matches!(rec.state, EnvState::Ready | EnvState::Failed) {
            continue;
        }
        if rec.root.exists() {
            fs::remove_dir_all(&rec.root).context(|| format!("removing {}", rec.root.display()))?;
        }
        for dir in failed_dirs(store, &id) {
            fs::remove_dir_all(&dir).context(|| format!("removing {}", dir.display()))?;
        }
        if rec.log_path.exists() {
            fs::remove_file(&rec.log_path)
                .context(|| format!("removing {}", rec.log_path.display()))?;
        }
        removed.push(id);
    }
    Ok(removed)
}
