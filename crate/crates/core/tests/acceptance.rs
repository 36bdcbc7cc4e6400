//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

mod common;

use std::fs;
use std::process::Output;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use common::{gen, Sandbox, FAIL_DOC, MALFORMED_DOC, PASS_DOC};
use saucer::registry::{
    commit_registry, compatible_triples, load_registry, validate_selection, AssetKind, Triple,
};
use saucer::run::RunRecord;
use saucer::{env, Error, Store};

type Check = Result<String, String>;
type Criterion = fn() -> Check;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn within(limit: Duration, started: Instant) -> Check {
    let took = started.elapsed();
    ensure!(took < limit, "took {took:.2?}, limit {limit:?}");
    Ok(format!("{took:.2?}"))
}

fn compatibility_oracle() -> Check {
    const REGISTRIES: usize = 200;
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(0x5eed);
    let mut checked = 0usize;
    let mut disagreements = 0usize;
    for _ in 0..REGISTRIES {
        let reg = gen::registry(&mut rng, 12, 3);
        let triples = compatible_triples(&reg);
        for m in &reg.assets {
            for d in &reg.assets {
                for v in &reg.assets {
                    let t = Triple {
                        model: m.id.clone(),
                        dataset: d.id.clone(),
                        verification: v.id.clone(),
                    };
                    let listed = triples
                        .iter()
                        .find(|(_, list)| list.contains(&t))
                        .map(|(env, _)| env.clone());
                    let validated = validate_selection(&reg, &m.id, &d.id, &v.id).ok();
                    if listed != validated {
                        disagreements += 1;
                    }
                    checked += 1;
                }
            }
        }
    }
    ensure!(
        disagreements == 0,
        "{disagreements} disagreements over {checked} triples"
    );
    let time = within(Duration::from_secs(5), started)?;
    Ok(format!(
        "{REGISTRIES} registries, {checked} triples, 0 disagreements, {time}"
    ))
}

fn counter_world() -> (Sandbox, saucer::AssetRecord, std::path::PathBuf) {
    let sb = Sandbox::new();
    let interp = sb.stub_interpreter("stub-python", "exit 0");
    let counter = sb.path("counter");
    let bump = format!(
        "sleep 0.2\nn=$(cat '{c}' 2>/dev/null || echo 0); echo $((n+1)) > '{c}'",
        c = counter.display()
    );
    let setup = sb.setup_script("setup.sh", &interp, &bump);
    let asset = sb.register(&setup, AssetKind::EnvSetup, "eA");
    (sb, asset, counter)
}

fn provisioning_idempotence() -> Check {
    let started = Instant::now();

    let (sb, asset, counter) = counter_world();
    let a = env::ensure_ready(&sb.store, &asset).map_err(|e| e.to_string())?;
    let b = env::ensure_ready(&sb.store, &asset).map_err(|e| e.to_string())?;
    let sequential = fs::read_to_string(&counter).unwrap_or_default();
    ensure!(
        sequential.trim() == "1",
        "sequential counter reads {sequential:?}"
    );
    ensure!(a == b, "sequential calls returned different records");

    let (sb, asset, counter) = counter_world();
    let results: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..8)
            .map(|_| s.spawn(|| env::ensure_ready(&sb.store, &asset)))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let concurrent = fs::read_to_string(&counter).unwrap_or_default();
    ensure!(
        concurrent.trim() == "1",
        "concurrent counter reads {concurrent:?}"
    );
    let records: Vec<_> = results
        .into_iter()
        .collect::<Result<_, _>>()
        .map_err(|e: Error| e.to_string())?;
    ensure!(
        records
            .iter()
            .all(|r| r == &records[0] && r.state == saucer::EnvState::Ready),
        "concurrent callers saw different records"
    );

    let time = within(Duration::from_secs(10), started)?;
    Ok(format!(
        "counter = 1 after 2 sequential and 8 concurrent calls, {time}"
    ))
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn stub_end_to_end() -> Check {
    let started = Instant::now();
    let sb = Sandbox::new();
    let mut seen = Vec::new();
    for (label, doc, expected) in [
        ("pass", PASS_DOC, 0),
        ("fail", FAIL_DOC, 1),
        ("malformed", MALFORMED_DOC, 5),
    ] {
        let interp = sb.canned_interpreter(&format!("interp-{label}"), doc, 0);
        let setup = sb.setup_script(&format!("setup-{label}.sh"), &interp, "");
        let env_asset = sb.register(&setup, AssetKind::EnvSetup, &format!("env-{label}"));
        let [m, d, v] = sb.triple(label, &env_asset);
        let out = sb.cli(&[
            "run",
            "--model",
            &m.name,
            "--dataset",
            &d.name,
            "--verify",
            &v.name,
        ]);
        let code = exit_code(&out);
        ensure!(
            code == expected,
            "{label}: exit {code}, expected {expected}; stderr: {}",
            String::from_utf8_lossy(&out.stderr)
        );

        let history = saucer::run::list_history(&sb.store).map_err(|e| e.to_string())?;
        let newest = history.first().ok_or("no history entry")?;
        let record_path = sb.store.runs_dir().join(&newest.run_id).join("record.json");
        let bytes = fs::read(&record_path).map_err(|e| format!("{label}: record.json: {e}"))?;
        let record: RunRecord = serde_json::from_slice(&bytes)
            .map_err(|e| format!("{label}: record.json does not parse: {e}"))?;
        ensure!(
            record.result.is_some()
                || record.runner_exit_code != 0
                || record.runner_error.is_some(),
            "{label}: record without result or failure cause"
        );
        seen.push(format!("{label}->{code}"));
    }
    let time = within(Duration::from_secs(10), started)?;
    Ok(format!(
        "{}, record.json valid in each case, {time}",
        seen.join(" ")
    ))
}

/// Corruptions that are always malformed.
fn corrupt(rng: &mut StdRng, good: &[u8], reg: &saucer::Registry) -> Vec<u8> {
    let trimmed = good.trim_ascii_end();
    match rng.random_range(0..7) {
        0 => trimmed[..rng.random_range(0..trimmed.len())].to_vec(),
        1 => {
            let mut b = good.to_vec();
            let at = rng.random_range(0..=b.len());
            b.insert(at, 0xff);
            b
        }
        2 => (0..rng.random_range(0..64))
            .map(|_| rng.random())
            .chain([0xfe])
            .collect(),
        3 => {
            let mut v: serde_json::Value = serde_json::from_slice(good).unwrap();
            v["schema_version"] = serde_json::json!(rng.random_range(2..100));
            serde_json::to_vec(&v).unwrap()
        }
        4 if !reg.assets.is_empty() => {
            let mut v: serde_json::Value = serde_json::from_slice(good).unwrap();
            let i = rng.random_range(0..reg.assets.len());
            v["assets"][i]["env_setup_ref"] = serde_json::json!("dangling0000");
            serde_json::to_vec(&v).unwrap()
        }
        5 if !reg.assets.is_empty() => {
            let mut v: serde_json::Value = serde_json::from_slice(good).unwrap();
            let i = rng.random_range(0..reg.assets.len());
            v["assets"][i]["kind"] = serde_json::json!("notebook");
            serde_json::to_vec(&v).unwrap()
        }
        _ => {
            let mut v: serde_json::Value = serde_json::from_slice(good).unwrap();
            v.as_object_mut().unwrap().remove("assets");
            serde_json::to_vec(&v).unwrap()
        }
    }
}

fn registry_durability() -> Check {
    const ROUND_TRIPS: usize = 100;
    let started = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let store = Store::new(dir.path());
    let mut rng = StdRng::seed_from_u64(42);
    let mut corrupted = 0;
    for i in 0..ROUND_TRIPS {
        let reg = gen::registry(&mut rng, 12, 3);
        commit_registry(&store, &reg).map_err(|e| e.to_string())?;
        let loaded = load_registry(store.root()).map_err(|e| e.to_string())?;
        ensure!(loaded == reg, "round trip {i} changed the registry");

        let good = fs::read(store.registry_path()).map_err(|e| e.to_string())?;
        for _ in 0..3 {
            let bad = corrupt(&mut rng, &good, &reg);
            fs::write(store.registry_path(), &bad).map_err(|e| e.to_string())?;
            let outcome = std::panic::catch_unwind(|| load_registry(store.root()));
            match outcome {
                Ok(Err(Error::CorruptRegistry { .. })) => corrupted += 1,
                Ok(Err(e)) => return Err(format!("corruption gave {e}")),
                Ok(Ok(_)) => {
                    return Err(format!(
                        "corrupt file loaded: {}",
                        String::from_utf8_lossy(&bad)
                    ))
                }
                Err(_) => return Err("load panicked on a corrupt file".into()),
            }
        }
    }
    let time = within(Duration::from_secs(5), started)?;
    Ok(format!(
        "{ROUND_TRIPS} identity round trips, {corrupted} corrupt files rejected, {time}"
    ))
}

fn selection_rejection() -> Check {
    let sb = Sandbox::new();
    let interp = sb.stub_interpreter("stub", "exit 0");
    let env_a = sb.register(
        &sb.setup_script("a.sh", &interp, ""),
        AssetKind::EnvSetup,
        "env-alpha",
    );
    let env_b = sb.register(
        &sb.setup_script("b.sh", &interp, "# b"),
        AssetKind::EnvSetup,
        "env-beta",
    );
    let [m, d, _] = sb.triple("a", &env_a);
    let [_, _, v] = sb.triple("b", &env_b);
    let started = Instant::now();
    let out = sb.cli(&[
        "run",
        "--model",
        &m.name,
        "--dataset",
        &d.name,
        "--verify",
        &v.name,
    ]);
    let time = within(Duration::from_secs(1), started)?;
    let code = exit_code(&out);
    ensure!(code == 4, "exit {code}, expected 4");
    let msg = String::from_utf8_lossy(&out.stderr);
    ensure!(
        msg.contains("env-alpha") && msg.contains("env-beta"),
        "message does not name both environments: {msg}"
    );
    Ok(format!(
        "exit 4, message names env-alpha and env-beta, {time}"
    ))
}

fn main() {
    let criteria: [(&str, Criterion); 5] = [
        ("compatibility oracle", compatibility_oracle),
        ("provisioning idempotence", provisioning_idempotence),
        ("stub end-to-end", stub_end_to_end),
        ("registry durability", registry_durability),
        ("selection rejection", selection_rejection),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("{} of {} acceptance criteria passed", 5 - failed, 5);
    if failed > 0 {
        std::process::exit(1);
    }
}
