"""Smoke test for the saucer_py extension module.

Build and run:

    cargo build -p saucer-py --features extension-module
    cp target/debug/libsaucer_py.so python/saucer_py.so
    python3 python/smoke_test.py
"""

import hashlib
import json
import os
import sys
import tempfile
from pathlib import Path

sys.path.append(str(Path(__file__).resolve().parent))

import saucer_py as sp  # noqa: E402

PASS_DOC = {
    "schema_version": 1,
    "verdict": "pass",
    "stage_timings": {"model_load": 0.1, "dataset_load": 0.2, "verification": 0.3},
    "metrics": {"max_violation": 0.0},
    "messages": [],
}


def write(path, text, mode=0o644):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    path.chmod(mode)
    return path


def expect_error(code, fn, *args):
    try:
        fn(*args)
    except sp.SaucerError as exc:
        message, exit_code = exc.args
        assert exit_code == code, (exit_code, message)
        return message
    raise AssertionError(f"{fn.__name__} did not raise")


def main():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        store = sp.Store(tmp / "store", lock_timeout=2.0, provision_timeout=30.0)

        doc = write(tmp / "result.json", json.dumps(PASS_DOC))
        interp = write(
            tmp / "stub-python",
            f'#!/bin/sh\ncp "{doc}" "$SAUCER_RUN_DIR/result.json"\n',
            mode=0o755,
        )
        setup_text = f"printf '%s\\n' '{interp}' > \"$SAUCER_ENV_ROOT/interpreter\"\n"
        setup = write(tmp / "setup.sh", setup_text)

        env = sp.register_asset(store, setup, "env_setup", "env-a")
        assert env.kind == "env_setup" and env.env_setup_ref is None
        assert env.content_hash == hashlib.sha256(setup_text.encode()).hexdigest()
        expected_env_id = hashlib.sha256(setup_text.encode()).hexdigest()[:12]
        assert sp.env_id_for(setup_text.encode()) == expected_env_id

        ids = {}
        for kind, name in [("model_load", "m"), ("dataset_load", "d"), ("verification", "v")]:
            rec = sp.register_asset(store, write(tmp / f"{name}.py", f"# {name}\n"), kind, name)
            rec = sp.associate(store, rec.id, env.id)
            assert rec.env_setup_ref == env.id
            ids[name] = rec.id

        assert len(sp.list_assets(store)) == 4
        assert [a.name for a in sp.list_assets(store, "verification")] == ["v"]
        assert sp.validate_selection(store, ids["m"], ids["d"], ids["v"]) == env.id
        assert sp.compatible_triples(store) == [(env.id, [(ids["m"], ids["d"], ids["v"])])]

        parsed = sp.parse_result(json.dumps(PASS_DOC).encode())
        assert parsed["verdict"] == "pass"
        expect_error(5, sp.parse_result, b'{"schema_version": 1, "verdict": "error"}')

        expect_error(4, sp.register_asset, store, tmp / "nope.py", "model_load", "x")
        expect_error(4, sp.register_asset, store, tmp / "m.py", "model_load", "m")

        ready = sp.ensure_ready(store, "env-a")
        assert ready["state"] == "ready" and ready["env_id"] == expected_env_id
        assert sp.env_status(store, expected_env_id) == "ready"

        record = sp.run_verification(
            store, "m", "d", "v", tmp / "shim.py", params={"scale": 2, "tol": 1e-6}
        )
        assert record["result"]["verdict"] == "pass", record
        history = sp.list_history(store)
        assert [h["run_id"] for h in history] == [record["manifest"]["run_id"]]
        assert sp.show_run(store, history[0]["run_id"]) == record

        os.environ["SAUCER_SHIM"] = str(tmp / "shim.py")
        assert sp.main(["--store", str(store.root), "list"]) == 0
        assert sp.main(["--store", str(store.root), "bogus"]) == 2

        sp.remove_asset(store, env.id)
        assert all(a.env_setup_ref is None for a in sp.list_assets(store))
        assert sp.gc(store) == [expected_env_id]

    print("saucer_py smoke test passed")


if __name__ == "__main__":
    main()
