"""Dataset manifest: labeled items with a two-level grouping hierarchy.

An item belongs to a group (patient/volume analog) and every group nests
inside exactly one supergroup (dataset/kidney analog). The manifest is the
only description of the data the engine ever sees; trainers receive item ids
(or the optional numeric features used by the built-in learner).
"""

from __future__ import annotations

import csv
import io
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

log = logging.getLogger(__name__)

_CORE_COLUMNS = ("item_id", "group_id", "supergroup_id", "label")
_OPTIONAL_COLUMNS = ("features", "payload_ref")


class ManifestError(Exception):
    """Base error for manifest loading and validation."""


class ManifestParseError(ManifestError):
    def __init__(self, message: str, row: int | None = None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class ManifestIntegrityError(ManifestError):
    pass


class EmptyManifestError(ManifestError):
    pass


@dataclass(frozen=True)
class DataItem:
    item_id: str
    group_id: str
    supergroup_id: str
    label: str
    features: tuple[float, ...] | None = None
    payload_ref: str | None = None


@dataclass(frozen=True)
class Manifest:
    """Ordered items plus class names in first-appearance order."""

    items: tuple[DataItem, ...]
    class_names: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.items)

    def label_index(self, label: str) -> int:
        return self.class_names.index(label)


def build_manifest(items: list[DataItem] | tuple[DataItem, ...]) -> Manifest:
    """Validate items and derive class names; raises on integrity violations."""
    if not items:
        raise EmptyManifestError("manifest contains no items")
    seen_ids: set[str] = set()
    group_super: dict[str, str] = {}
    classes: list[str] = []
    for item in items:
        if item.item_id in seen_ids:
            raise ManifestIntegrityError(f"duplicate item_id {item.item_id!r}")
        seen_ids.add(item.item_id)
        prev = group_super.get(item.group_id)
        if prev is None:
            group_super[item.group_id] = item.supergroup_id
        elif prev != item.supergroup_id:
            raise ManifestIntegrityError(
                f"group {item.group_id!r} spans supergroups {prev!r} and {item.supergroup_id!r}"
            )
        if item.label not in classes:
            classes.append(item.label)
    manifest = Manifest(items=tuple(items), class_names=tuple(classes))
    counts = Counter(item.label for item in items)
    if len(set(counts.values())) > 1:
        log.info("classes are imbalanced: %s", dict(counts))
    return manifest


def _parse_features(cell: str, row: int) -> tuple[float, ...]:
    try:
        return tuple(float(part) for part in cell.split(";"))
    except ValueError as exc:
        raise ManifestParseError(f"bad features value {cell!r}: {exc}", row=row) from None


def loads_manifest(text: str, parse_features: bool = True) -> Manifest:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise EmptyManifestError("manifest file is empty") from None

    known = set(_CORE_COLUMNS) | set(_OPTIONAL_COLUMNS)
    for name in header:
        if name not in known:
            raise ManifestParseError(f"unknown column {name!r}")
    if "item_id" not in header or "label" not in header:
        raise ManifestParseError("manifest needs at least item_id and label columns")
    col = {name: header.index(name) for name in header}

    items: list[DataItem] = []
    for row_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ManifestParseError(
                f"expected {len(header)} fields, got {len(row)}", row=row_no
            )

        def cell(name: str) -> str:
            return row[col[name]] if name in col else ""

        item_id = cell("item_id")
        if not item_id:
            raise ManifestParseError("empty item_id", row=row_no)
        label = cell("label")
        if not label:
            raise ManifestParseError("empty label", row=row_no)
        # Item-level-only datasets need no fake hierarchy: group defaults to
        # the item, supergroup to the group.
        group_id = cell("group_id") or item_id
        supergroup_id = cell("supergroup_id") or group_id
        features = None
        if parse_features and cell("features"):
            features = _parse_features(cell("features"), row_no)
        payload_ref = cell("payload_ref") or None
        items.append(
            DataItem(
                item_id=item_id,
                group_id=group_id,
                supergroup_id=supergroup_id,
                label=label,
                features=features,
                payload_ref=payload_ref,
            )
        )
    return build_manifest(items)


def load_manifest(path: str | Path, parse_features: bool = True) -> Manifest:
    return loads_manifest(Path(path).read_text(encoding="utf-8"), parse_features=parse_features)


def dumps_manifest(manifest: Manifest) -> str:
    """Canonical text form; loading it back reproduces the same bytes."""
    with_features = any(item.features is not None for item in manifest.items)
    with_payload = any(item.payload_ref is not None for item in manifest.items)
    header = list(_CORE_COLUMNS)
    if with_features:
        header.append("features")
    if with_payload:
        header.append("payload_ref")
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    for item in manifest.items:
        row = [item.item_id, item.group_id, item.supergroup_id, item.label]
        if with_features:
            row.append(";".join(repr(x) for x in item.features) if item.features else "")
        if with_payload:
            row.append(item.payload_ref or "")
        writer.writerow(row)
    return out.getvalue()


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    Path(path).write_text(dumps_manifest(manifest), encoding="utf-8")


@dataclass(frozen=True)
class ManifestSummary:
    total: int
    per_class: dict[str, int] = field(default_factory=dict)
    per_group: dict[str, int] = field(default_factory=dict)
    per_supergroup: dict[str, int] = field(default_factory=dict)
    per_class_supergroup: dict[tuple[str, str], int] = field(default_factory=dict)

    def count_for(self, label: str) -> int:
        return self.per_class.get(label, 0)


def summarize(manifest: Manifest) -> ManifestSummary:
    per_class: Counter = Counter()
    per_group: Counter = Counter()
    per_supergroup: Counter = Counter()
    cross: Counter = Counter()
    for item in manifest.items:
        per_class[item.label] += 1
        per_group[item.group_id] += 1
        per_supergroup[item.supergroup_id] += 1
        cross[(item.label, item.supergroup_id)] += 1
    return ManifestSummary(
        total=len(manifest.items),
        per_class=dict(per_class),
        per_group=dict(per_group),
        per_supergroup=dict(per_supergroup),
        per_class_supergroup=dict(cross),
    )
