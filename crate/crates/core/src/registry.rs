//! Catalog of functional and environment-setup scripts.
//!
//! The registry lives in `<store_root>/registry.json`. Every mutation runs
//! under the store's `registry.lock` and replaces the file atomically, so
//! readers never observe a torn write.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, SelectionEntry};
use crate::store::{self, Store};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssetKind {
    ModelLoad,
    DatasetLoad,
    Verification,
    EnvSetup,
}

impl AssetKind {
    pub const ALL: [AssetKind; 4] = [
        AssetKind::ModelLoad,
        AssetKind::DatasetLoad,
        AssetKind::Verification,
        AssetKind::EnvSetup,
    ];

    /// Wire name, as stored in `registry.json`.
    pub fn as_str(self) -> &'static str {
        match self {
            AssetKind::ModelLoad => "model_load",
            AssetKind::DatasetLoad => "dataset_load",
            AssetKind::Verification => "verification",
            AssetKind::EnvSetup => "env_setup",
        }
    }

    /// Command-line spelling.
    pub fn label(self) -> &'static str {
        match self {
            AssetKind::ModelLoad => "model-load",
            AssetKind::DatasetLoad => "dataset-load",
            AssetKind::Verification => "verification",
            AssetKind::EnvSetup => "env-setup",
        }
    }

    pub fn is_functional(self) -> bool {
        self != AssetKind::EnvSetup
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s || k.label() == s)
    }
}

impl fmt::Display for AssetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AssetId(pub String);

impl AssetId {
    pub fn generate() -> Self {
        AssetId(store::random_hex(12))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AssetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for AssetId {
    fn from(s: &str) -> Self {
        AssetId(s.to_owned())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssetRecord {
    pub id: AssetId,
    pub name: String,
    pub kind: AssetKind,
    pub path: PathBuf,
    pub content_hash: String,
    pub env_setup_ref: Option<AssetId>,
    pub registered_at: DateTime<Utc>,
}

impl AssetRecord {
    /// Whether the registered file is still present on disk.
    pub fn file_present(&self) -> bool {
        self.path.is_file()
    }

    /// Reads the current bytes of the asset's file.
    pub fn read_bytes(&self) -> Result<Vec<u8>> {
        fs::read(&self.path).map_err(|source| Error::FileNotReadable {
            path: self.path.clone(),
            source,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Registry {
    pub schema_version: u32,
    pub assets: Vec<AssetRecord>,
}

impl Default for Registry {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            assets: Vec::new(),
        }
    }
}

/// One runnable selection.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub model: AssetId,
    pub dataset: AssetId,
    pub verification: AssetId,
}

impl Registry {
    pub fn get(&self, id: &AssetId) -> Option<&AssetRecord> {
        self.assets.iter().find(|a| &a.id == id)
    }

    fn get_mut(&mut self, id: &AssetId) -> Option<&mut AssetRecord> {
        self.assets.iter_mut().find(|a| &a.id == id)
    }

    fn require(&self, id: &AssetId) -> Result<&AssetRecord> {
        self.get(id)
            .ok_or_else(|| Error::UnknownAsset(id.to_string()))
    }

    /// Looks up an asset by id, falling back to a name match among `kinds`.
    pub fn resolve(&self, reference: &str, kinds: &[AssetKind]) -> Result<&AssetRecord> {
        if let Some(rec) = self.assets.iter().find(|a| a.id.as_str() == reference) {
            return Ok(rec);
        }
        let mut matches = self
            .assets
            .iter()
            .filter(|a| a.name == reference && kinds.contains(&a.kind));
        match (matches.next(), matches.next()) {
            (Some(rec), None) => Ok(rec),
            (Some(_), Some(_)) => Err(Error::AmbiguousAsset(reference.to_owned())),
            (None, _) => Err(Error::UnknownAsset(reference.to_owned())),
        }
    }

    /// Display label for an environment-setup reference.
    pub fn env_label(&self, id: &AssetId) -> String {
        match self.get(id) {
            Some(rec) => rec.name.clone(),
            None => id.to_string(),
        }
    }

    /// Checks schema version, id/name uniqueness and referential integrity.
    pub fn check_integrity(&self) -> std::result::Result<(), String> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        let mut ids = HashSet::new();
        let mut names = HashSet::new();
        let kinds: HashMap<&AssetId, AssetKind> =
            self.assets.iter().map(|a| (&a.id, a.kind)).collect();
        for a in &self.assets {
            if !ids.insert(&a.id) {
                return Err(format!("duplicate asset id {}", a.id));
            }
            if a.id.as_str().is_empty() {
                return Err("empty asset id".into());
            }
            if a.name.is_empty() {
                return Err(format!("asset {} has an empty name", a.id));
            }
            if !names.insert((&a.name, a.kind)) {
                return Err(format!("duplicate {} name '{}'", a.kind, a.name));
            }
            if !a.path.is_absolute() {
                return Err(format!("asset {} has a relative path", a.id));
            }
            if !store::is_lower_hex(&a.content_hash, 64) {
                return Err(format!("asset {} has a malformed content_hash", a.id));
            }
            match (&a.env_setup_ref, a.kind) {
                (Some(_), AssetKind::EnvSetup) => {
                    return Err(format!("env-setup asset {} carries an association", a.id))
                }
                (Some(r), _) => match kinds.get(r) {
                    Some(AssetKind::EnvSetup) => {}
                    Some(k) => return Err(format!("asset {} references {r}, a {k} asset", a.id)),
                    None => return Err(format!("asset {} references unknown asset {r}", a.id)),
                },
                (None, _) => {}
            }
        }
        Ok(())
    }
}

/// Reads the registry. A missing file is an empty registry.
pub fn load_registry(store_root: &Path) -> Result<Registry> {
    let path = store_root.join("registry.json");
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == ErrorKind::NotFound => return Ok(Registry::default()),
        Err(e) => return Err(Error::io(format!("reading {}", path.display()), e)),
    };
    let corrupt = |reason: String| Error::CorruptRegistry {
        path: path.clone(),
        reason,
    };
    let registry: Registry = serde_json::from_slice(&bytes).map_err(|e| corrupt(e.to_string()))?;
    registry.check_integrity().map_err(corrupt)?;
    Ok(registry)
}

fn write_registry(store: &Store, registry: &Registry) -> Result<()> {
    if let Err(reason) = registry.check_integrity() {
        return Err(Error::CorruptRegistry {
            path: store.registry_path(),
            reason,
        });
    }
    let mut json = serde_json::to_vec_pretty(registry).expect("registry serializes");
    json.push(b'\n');
    store::atomic_write(&store.registry_path(), &json)
}

fn lock_registry(store: &Store) -> Result<store::LockGuard> {
    let path = store.registry_lock_path();
    store::acquire_lock(&path, store.lock_timeout)?.ok_or(Error::StoreLocked(path))
}

/// Atomically replaces the registry file under the registry lock.
pub fn commit_registry(store: &Store, registry: &Registry) -> Result<()> {
    let _guard = lock_registry(store)?;
    write_registry(store, registry)
}

/// Load-modify-commit under one lock acquisition. Nothing is written if `f` fails.
pub fn update_registry<T>(store: &Store, f: impl FnOnce(&mut Registry) -> Result<T>) -> Result<T> {
    let _guard = lock_registry(store)?;
    let mut registry = load_registry(store.root())?;
    let out = f(&mut registry)?;
    write_registry(store, &registry)?;
    Ok(out)
}

fn absolute(path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        std::env::current_dir()
            .map(|cwd| cwd.join(path))
            .unwrap_or_else(|_| path.to_path_buf())
    }
}

pub fn register_asset(
    store: &Store,
    path: &Path,
    kind: AssetKind,
    name: &str,
) -> Result<AssetRecord> {
    if name.trim().is_empty() {
        return Err(Error::InvalidArgument(
            "asset name must not be empty".into(),
        ));
    }
    let path = absolute(path);
    let bytes = fs::read(&path).map_err(|source| Error::FileNotReadable {
        path: path.clone(),
        source,
    })?;
    let record = AssetRecord {
        id: AssetId::generate(),
        name: name.to_owned(),
        kind,
        path,
        content_hash: store::sha256_hex(&bytes),
        env_setup_ref: None,
        registered_at: Utc::now(),
    };
    update_registry(store, |reg| {
        if reg.assets.iter().any(|a| a.name == name && a.kind == kind) {
            return Err(Error::DuplicateName {
                name: name.to_owned(),
                kind,
            });
        }
        let mut record = record;
        while reg.get(&record.id).is_some() {
            record.id = AssetId::generate();
        }
        reg.assets.push(record.clone());
        Ok(record)
    })
}

/// Links a functional asset to an environment-setup asset, replacing any previous link.
pub fn associate(store: &Store, asset_id: &AssetId, env_setup_id: &AssetId) -> Result<AssetRecord> {
    update_registry(store, |reg| {
        let env = reg.require(env_setup_id)?;
        if env.kind != AssetKind::EnvSetup {
            return Err(Error::KindMismatch(format!(
                "'{}' is a {} asset, not env-setup",
                env.name, env.kind
            )));
        }
        let target = reg.require(asset_id)?;
        if target.kind == AssetKind::EnvSetup {
            return Err(Error::KindMismatch(format!(
                "'{}' is an env-setup asset and cannot be associated",
                target.name
            )));
        }
        let target = reg.get_mut(asset_id).expect("checked above");
        target.env_setup_ref = Some(env_setup_id.clone());
        Ok(target.clone())
    })
}

/// Removes an asset. Removing an env-setup asset leaves its dependents unassociated.
pub fn remove_asset(store: &Store, asset_id: &AssetId) -> Result<()> {
    update_registry(store, |reg| {
        let before = reg.assets.len();
        reg.assets.retain(|a| &a.id != asset_id);
        if reg.assets.len() == before {
            return Err(Error::UnknownAsset(asset_id.to_string()));
        }
        for a in &mut reg.assets {
            if a.env_setup_ref.as_ref() == Some(asset_id) {
                a.env_setup_ref = None;
            }
        }
        Ok(())
    })
}

/// Assets sorted by (kind, name), optionally restricted to one kind.
pub fn list_assets(registry: &Registry, kind: Option<AssetKind>) -> Vec<AssetRecord> {
    let mut out: Vec<_> = registry
        .assets
        .iter()
        .filter(|a| kind.is_none_or(|k| a.kind == k))
        .cloned()
        .collect();
    out.sort_by(|a, b| (a.kind, &a.name, &a.id).cmp(&(b.kind, &b.name, &b.id)));
    out
}

/// Returns the environment-setup id shared by a model/dataset/verification selection.
pub fn validate_selection(
    registry: &Registry,
    model_id: &AssetId,
    dataset_id: &AssetId,
    verif_id: &AssetId,
) -> Result<AssetId> {
    let expected = [
        (model_id, AssetKind::ModelLoad),
        (dataset_id, AssetKind::DatasetLoad),
        (verif_id, AssetKind::Verification),
    ];
    let mut records = Vec::with_capacity(3);
    for (id, kind) in expected {
        let rec = registry.require(id)?;
        if rec.kind != kind {
            return Err(Error::KindMismatch(format!(
                "'{}' is a {} asset, expected {kind}",
                rec.name, rec.kind
            )));
        }
        records.push(rec);
    }
    let entries: Vec<SelectionEntry> = records
        .iter()
        .map(|r| SelectionEntry {
            kind: r.kind,
            asset: r.name.clone(),
            env: r.env_setup_ref.as_ref().map(|e| registry.env_label(e)),
        })
        .collect();
    if records.iter().any(|r| r.env_setup_ref.is_none()) {
        return Err(Error::Unassociated(entries));
    }
    let shared = records[0].env_setup_ref.clone().expect("checked above");
    if records
        .iter()
        .any(|r| r.env_setup_ref.as_ref() != Some(&shared))
    {
        return Err(Error::IncompatibleEnvironments(entries));
    }
    Ok(shared)
}

/// Every runnable triple, grouped by environment-setup asset.
///
/// Each env-setup asset gets an entry, empty when it lacks one of the three
/// functional kinds. Triples are ordered by asset name.
pub fn compatible_triples(registry: &Registry) -> BTreeMap<AssetId, Vec<Triple>> {
    let mut out = BTreeMap::new();
    for env in registry
        .assets
        .iter()
        .filter(|a| a.kind == AssetKind::EnvSetup)
    {
        let members = |kind: AssetKind| -> Vec<&AssetRecord> {
            let mut v: Vec<_> = registry
                .assets
                .iter()
                .filter(|a| a.kind == kind && a.env_setup_ref.as_ref() == Some(&env.id))
                .collect();
            v.sort_by(|a, b| (&a.name, &a.id).cmp(&(&b.name, &b.id)));
            v
        };
        let models = members(AssetKind::ModelLoad);
        let datasets = members(AssetKind::DatasetLoad);
        let verifs = members(AssetKind::Verification);
        let mut triples = Vec::with_capacity(models.len() * datasets.len() * verifs.len());
        for m in &models {
            for d in &datasets {
                for v in &verifs {
                    triples.push(Triple {
                        model: m.id.clone(),
                        dataset: d.id.clone(),
                        verification: v.id.clone(),
                    });
                }
            }
        }
        out.insert(env.id.clone(), triples);
    }
    out
}
