"""Job specification: one JSON document describing a complete run.

Every source of randomness is seeded explicitly in the spec; there are no
wall-clock defaults, so a spec names one reproducible run. Relative paths
are resolved against the directory containing the spec file.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

from .partition import PartitionLevel

FORMAT_VERSION = 1
ALGORITHMS = ("nachos", "dachos")
BACKENDS = ("mock", "tiny", "exec")


class UsageError(Exception):
    """Bad spec or flags: the caller's mistake, exit code 1."""


@dataclass(frozen=True)
class JobSpec:
    run_id: str
    algorithm: str
    manifest: str
    k: int
    level: str
    seeds: dict[str, int]
    space: dict
    n: int
    epochs: int
    backend: dict
    store: str
    pool: str
    retries: int = 1

    def __post_init__(self):
        if not self.run_id or "/" in self.run_id:
            raise UsageError(f"run_id must be a non-empty name without '/', got {self.run_id!r}")
        if self.algorithm not in ALGORITHMS:
            raise UsageError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.algorithm == "nachos" and self.k < 3:
            raise UsageError("nachos needs k >= 3 (each inner training needs a non-empty set)")
        if self.algorithm == "dachos" and self.k < 2:
            raise UsageError("dachos needs k >= 2")
        try:
            PartitionLevel(self.level)
        except ValueError:
            raise UsageError(f"unknown partition level {self.level!r}") from None
        for name in ("partition", "sampling", "trainer"):
            if name not in self.seeds:
                raise UsageError(f"seeds must name {name!r}")
            if not isinstance(self.seeds[name], int):
                raise UsageError(f"seed {name!r} must be an integer")
        if self.n < 1 or self.epochs < 1:
            raise UsageError("n and epochs must be >= 1")
        if self.retries < 0:
            raise UsageError("retries must be >= 0")
        kind = self.backend.get("kind")
        if kind not in BACKENDS:
            raise UsageError(f"backend kind must be one of {BACKENDS}, got {kind!r}")
        if kind == "exec":
            command = self.backend.get("command")
            if not isinstance(command, list) or not command:
                raise UsageError("exec backend needs a non-empty command list")
        sources = [key for key in ("preset", "axes", "configs") if key in self.space]
        if len(sources) != 1:
            raise UsageError("space must give exactly one of preset, axes, configs")

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["format"] = FORMAT_VERSION
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "JobSpec":
        if not isinstance(payload, dict):
            raise UsageError("job spec must be a JSON object")
        version = payload.get("format", FORMAT_VERSION)
        if version != FORMAT_VERSION:
            raise UsageError(f"unsupported spec format {version!r}")
        known = {f for f in cls.__dataclass_fields__}
        extra = set(payload) - known - {"format"}
        if extra:
            raise UsageError(f"unknown spec fields: {sorted(extra)}")
        try:
            return cls(**{key: payload[key] for key in known if key in payload})
        except TypeError as exc:
            raise UsageError(f"incomplete spec: {exc}") from None


def dumps_jobspec(spec: JobSpec) -> str:
    return json.dumps(spec.to_dict(), sort_keys=True, indent=2) + "\n"


def loads_jobspec(text: str, base_dir: str | Path | None = None) -> JobSpec:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"spec is not valid JSON: {exc}") from None
    spec = JobSpec.from_dict(payload)
    if base_dir is not None:
        spec = resolve_paths(spec, base_dir)
    return spec


def load_jobspec(path: str | Path) -> JobSpec:
    path = Path(path)
    return loads_jobspec(path.read_text(encoding="utf-8"), base_dir=path.parent)


def save_jobspec(spec: JobSpec, path: str | Path) -> None:
    Path(path).write_text(dumps_jobspec(spec), encoding="utf-8")


def _resolved(base: Path, value: str) -> str:
    candidate = Path(value)
    return str(candidate) if candidate.is_absolute() else str(base / candidate)


def resolve_paths(spec: JobSpec, base_dir: str | Path) -> JobSpec:
    base = Path(base_dir)
    updates: dict = {"manifest": _resolved(base, spec.manifest), "store": _resolved(base, spec.store)}
    if not spec.pool.startswith("local:"):
        updates["pool"] = _resolved(base, spec.pool)
    if "configs" in spec.space:
        updates["space"] = {**spec.space, "configs": _resolved(base, spec.space["configs"])}
    payload = spec.to_dict()
    payload.update(updates)
    payload.pop("format")
    return JobSpec(**payload)
