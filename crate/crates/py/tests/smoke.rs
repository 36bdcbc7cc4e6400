use std::path::{Path, PathBuf};
use std::process::Command;

fn built_library() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    let profile_dir = exe.parent()?.parent()?;
    let lib = profile_dir.join("libsaucer_py.so");
    lib.exists().then_some(lib)
}

#[test]
fn python_smoke_script() {
    if Command::new("python3").arg("--version").output().is_err() {
        eprintln!("python3 not available; skipping");
        return;
    }
    let lib = built_library().expect("libsaucer_py.so next to the test binary");
    let site = tempfile::tempdir().unwrap();
    std::fs::copy(&lib, site.path().join("saucer_py.so")).unwrap();

    let script = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../python/smoke_test.py");
    let out = Command::new("python3")
        .arg(&script)
        .env("PYTHONPATH", site.path())
        .env_remove("SAUCER_HOME")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("smoke test passed"));
}
