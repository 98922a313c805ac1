#!/usr/bin/env python3
"""Kill a run mid-flight with SIGKILL, resume it, and diff the reports.

Runs the same job three times: once to completion for reference, once
killed partway through, then a resume of the killed store. Prints whether
the resumed report is byte-identical to the uninterrupted one.
"""

import argparse
import json
import subprocess
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from nestcv.checkpoint import CheckpointStore
from nestcv.manifest import write_manifest
from nestcv.synthetic import make_manifest


def write_job(root: Path, store: str, delay_s: float) -> Path:
    manifest_path = root / "manifest.csv"
    if not manifest_path.exists():
        write_manifest(make_manifest(n_groups=12, items_per_group=3, seed=1), manifest_path)
    spec = {
        "format": 1,
        "run_id": "demo",
        "algorithm": "nachos",
        "manifest": "manifest.csv",
        "k": 3,
        "level": "group",
        "seeds": {"partition": 1, "sampling": 2, "trainer": 3},
        "space": {"preset": "default"},
        "n": 3,
        "epochs": 3,
        "backend": {"kind": "mock", "delay_s": delay_s},
        "store": store,
        "pool": "local:2",
    }
    path = root / f"spec-{store}.json"
    path.write_text(json.dumps(spec, indent=2) + "\n")
    return path


def completed_tasks(store_root: Path) -> int:
    try:
        with CheckpointStore(store_root) as store:
            return sum(1 for r in store.read_records() if r.status == "completed")
    except OSError:
        return 0


def run_cli(spec: Path) -> None:
    subprocess.run(
        [sys.executable, "-m", "nestcv", "run", "--spec", str(spec)],
        check=True,
        stdout=subprocess.DEVNULL,
    )


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", default="demo-kill-resume")
    parser.add_argument("--delay", type=float, default=0.4, help="per-task delay seconds")
    parser.add_argument("--kill-after", type=int, default=4, help="completed tasks before SIGKILL")
    args = parser.parse_args(argv)

    root = Path(args.workdir)
    root.mkdir(parents=True, exist_ok=True)

    reference_spec = write_job(root, "store-reference", args.delay)
    print("running reference job to completion ...")
    run_cli(reference_spec)
    reference = (root / "store-reference" / "runs" / "demo" / "report.json").read_bytes()

    killed_spec = write_job(root, "store-killed", args.delay)
    print("starting second run, will SIGKILL it mid-flight ...")
    proc = subprocess.Popen(
        [sys.executable, "-m", "nestcv", "run", "--spec", str(killed_spec)],
        stdout=subprocess.DEVNULL,
    )
    store_root = root / "store-killed"
    deadline = time.monotonic() + 60.0
    while time.monotonic() < deadline:
        done = completed_tasks(store_root)
        if done >= args.kill_after:
            break
        if proc.poll() is not None:
            print("run finished before the kill threshold; raise --delay or lower --kill-after")
            return 1
        time.sleep(0.05)
    proc.kill()
    proc.wait()
    print(f"killed after {completed_tasks(store_root)} completed tasks")

    print("resuming ...")
    run_cli(killed_spec)
    resumed = (store_root / "runs" / "demo" / "report.json").read_bytes()

    if resumed == reference:
        print("OK: resumed report is byte-identical to the uninterrupted one")
        return 0
    print("MISMATCH: resumed report differs from the uninterrupted one")
    return 1


if __name__ == "__main__":
    raise SystemExit(main())
