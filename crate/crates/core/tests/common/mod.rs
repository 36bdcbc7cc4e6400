#![allow(dead_code)]

use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use saucer::registry::{self, AssetKind, AssetRecord};
use saucer::Store;

pub const PASS_DOC: &str = r#"{"schema_version":1,"verdict":"pass","stage_timings":{"model_load":0.0,"dataset_load":0.0,"verification":0.0},"metrics":{},"messages":[]}"#;
pub const FAIL_DOC: &str = r#"{"schema_version":1,"verdict":"fail","stage_timings":{"model_load":0.0,"dataset_load":0.0,"verification":0.0},"metrics":{"max_violation":1.0},"messages":["f(2x) != 2f(x)"]}"#;
pub const MALFORMED_DOC: &str = r#"{"schema_version":1,"verdict":"error","stage_timings":{}}"#;

pub struct Sandbox {
    pub dir: tempfile::TempDir,
    pub store: Store,
}

impl Sandbox {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::new(dir.path().join("store"));
        Self { dir, store }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn write(&self, name: &str, content: &str) -> PathBuf {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).unwrap();
        }
        fs::write(&p, content).unwrap();
        p
    }

    pub fn executable(&self, name: &str, content: &str) -> PathBuf {
        let p = self.write(name, content);
        fs::set_permissions(&p, fs::Permissions::from_mode(0o755)).unwrap();
        p
    }

    /// A stub interpreter: `sh` script invoked as `<stub> <shim> <manifest>`.
    pub fn stub_interpreter(&self, name: &str, body: &str) -> PathBuf {
        self.executable(name, &format!("#!/bin/sh\n{body}\n"))
    }

    /// Stub interpreter that writes `doc` as the result and exits with `code`.
    pub fn canned_interpreter(&self, name: &str, doc: &str, code: i32) -> PathBuf {
        let doc_file = self.write(&format!("{name}.result.json"), doc);
        self.stub_interpreter(
            name,
            &format!(
                "echo \"runner $1 $2\"\ncp '{}' \"$SAUCER_RUN_DIR/result.json\"\nexit {code}",
                doc_file.display()
            ),
        )
    }

    /// Setup script pointing the environment at `interpreter`. `extra` runs first.
    pub fn setup_script(&self, name: &str, interpreter: &Path, extra: &str) -> PathBuf {
        self.write(
            name,
            &format!(
                "{extra}\nprintf '%s\\n' '{}' > \"$SAUCER_ENV_ROOT/interpreter\"\n",
                interpreter.display()
            ),
        )
    }

    pub fn register(&self, path: &Path, kind: AssetKind, name: &str) -> AssetRecord {
        registry::register_asset(&self.store, path, kind, name).unwrap()
    }

    /// Registers an env-setup asset plus model/dataset/verification assets
    /// associated with it, named `m_<tag>`, `d_<tag>`, `v_<tag>`.
    pub fn triple(&self, tag: &str, env: &AssetRecord) -> [AssetRecord; 3] {
        let kinds = [
            ("m", AssetKind::ModelLoad),
            ("d", AssetKind::DatasetLoad),
            ("v", AssetKind::Verification),
        ];
        kinds.map(|(prefix, kind)| {
            let name = format!("{prefix}_{tag}");
            let p = self.write(&format!("scripts/{name}.py"), &format!("# {name}\n"));
            let rec = self.register(&p, kind, &name);
            registry::associate(&self.store, &rec.id, &env.id).unwrap()
        })
    }

    pub fn cli(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_saucer"))
            .arg("--store")
            .arg(self.store.root())
            .args(args)
            .env_remove("SAUCER_HOME")
            .env("SAUCER_SHIM", self.path("shim.py"))
            .output()
            .unwrap()
    }
}

/// SHA-256 via the system `sha256sum`, independent of the crate's hashing.
pub fn sha256sum(path: &Path) -> String {
    let out = Command::new("sha256sum").arg(path).output().unwrap();
    assert!(out.status.success());
    String::from_utf8(out.stdout).unwrap()[..64].to_owned()
}

pub mod gen {
    use chrono::{DateTime, TimeZone, Utc};
    use rand::Rng;
    use saucer::registry::{AssetId, AssetKind, AssetRecord, Registry};
    use std::path::PathBuf;

    const NAME_CHARS: &[char] = &['a', 'b', 'Z', '0', '9', '_', '-', ' ', 'é', '"', '\\'];

    fn name(rng: &mut impl Rng, i: usize) -> String {
        let len = rng.random_range(1..6);
        let s: String = (0..len)
            .map(|_| NAME_CHARS[rng.random_range(0..NAME_CHARS.len())])
            .collect();
        format!("{s}{i}")
    }

    fn timestamp(rng: &mut impl Rng) -> DateTime<Utc> {
        Utc.timestamp_opt(
            rng.random_range(0..4_000_000_000),
            rng.random_range(0..1_000_000_000),
        )
        .unwrap()
    }

    /// A well-formed registry of at most `max_assets` assets and `max_envs`
    /// env-setup assets. Functional assets are associated at random.
    pub fn registry(rng: &mut impl Rng, max_assets: usize, max_envs: usize) -> Registry {
        let n_envs = rng.random_range(0..=max_envs.min(max_assets));
        let n_total = rng.random_range(n_envs..=max_assets);
        let mut assets = Vec::new();
        let mut env_ids: Vec<AssetId> = Vec::new();
        for i in 0..n_total {
            let kind = if i < n_envs {
                AssetKind::EnvSetup
            } else {
                [
                    AssetKind::ModelLoad,
                    AssetKind::DatasetLoad,
                    AssetKind::Verification,
                ][rng.random_range(0..3)]
            };
            let id = AssetId(format!(
                "{:012x}",
                rng.random::<u64>() & 0xffff_ffff_ffff ^ i as u64
            ));
            let env_setup_ref = if kind == AssetKind::EnvSetup || env_ids.is_empty() {
                None
            } else if rng.random_bool(0.85) {
                Some(env_ids[rng.random_range(0..env_ids.len())].clone())
            } else {
                None
            };
            if kind == AssetKind::EnvSetup {
                env_ids.push(id.clone());
            }
            let hash: String = (0..64)
                .map(|_| char::from_digit(rng.random_range(0..16), 16).unwrap())
                .collect();
            assets.push(AssetRecord {
                id,
                name: name(rng, i),
                kind,
                path: PathBuf::from(format!("/assets/{i}/script.py")),
                content_hash: hash,
                env_setup_ref,
                registered_at: timestamp(rng),
            });
        }
        // interleave kinds so env-setup assets are not always first on disk
        for i in (1..assets.len()).rev() {
            let j = rng.random_range(0..=i);
            assets.swap(i, j);
        }
        let mut ids = std::collections::HashSet::new();
        assets.retain(|a| ids.insert(a.id.clone()));
        assets.retain(|a| a.env_setup_ref.as_ref().is_none_or(|r| ids.contains(r)));
        Registry {
            schema_version: 1,
            assets,
        }
    }
}
