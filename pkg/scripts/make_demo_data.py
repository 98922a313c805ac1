#!/usr/bin/env python3
"""Synthesize a demo dataset and a ready-to-run job spec.

Writes manifest.csv and spec.json into --out; afterwards
`nestcv run --spec <out>/spec.json` works as-is.
"""

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from nestcv.manifest import write_manifest
from nestcv.synthetic import make_manifest


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--groups", type=int, default=24)
    parser.add_argument("--items-per-group", type=int, default=5)
    parser.add_argument("--supergroups", type=int, default=6)
    parser.add_argument("--classes", type=int, default=2)
    parser.add_argument("--separation", type=float, default=4.0)
    parser.add_argument("--noise", type=float, default=1.0)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--algorithm", choices=["nachos", "dachos"], default="nachos")
    parser.add_argument("--k", type=int, default=4)
    parser.add_argument("--n", type=int, default=9, help="configs to sample")
    parser.add_argument("--epochs", type=int, default=3)
    parser.add_argument("--level", choices=["item", "group", "supergroup"], default="group")
    parser.add_argument("--backend", choices=["mock", "tiny"], default="mock")
    parser.add_argument("--pool", default="local:2")
    args = parser.parse_args(argv)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = make_manifest(
        n_groups=args.groups,
        items_per_group=args.items_per_group,
        n_supergroups=args.supergroups,
        n_classes=args.classes,
        separation=args.separation,
        noise=args.noise,
        seed=args.seed,
    )
    write_manifest(manifest, out / "manifest.csv")

    spec = {
        "format": 1,
        "run_id": "demo",
        "algorithm": args.algorithm,
        "manifest": "manifest.csv",
        "k": args.k,
        "level": args.level,
        "seeds": {"partition": 1, "sampling": 2, "trainer": 3},
        "space": {"preset": "default"},
        "n": args.n,
        "epochs": args.epochs,
        "backend": {"kind": args.backend},
        "store": "store",
        "pool": args.pool,
    }
    (out / "spec.json").write_text(json.dumps(spec, indent=2) + "\n")
    print(f"wrote {out / 'manifest.csv'} ({len(manifest.items)} items)")
    print(f"wrote {out / 'spec.json'}")
    print(f"next: nestcv run --spec {out / 'spec.json'}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
