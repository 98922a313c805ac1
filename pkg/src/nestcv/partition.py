"""Fold assignment at item, group, or supergroup granularity.

Partitioning at a coarser level keeps correlated items (all images of one
patient, all volumes of one kidney) inside a single fold so no information
leaks between training and evaluation folds.
"""

from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .manifest import Manifest
from .rng import SplitMix64, derive_state


class PartitionLevel(str, Enum):
    ITEM = "item"
    GROUP = "group"
    SUPERGROUP = "supergroup"


class PartitionError(Exception):
    pass


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    level: PartitionLevel
    seed: int
    fold_of: dict[str, int]

    def fold_sizes(self) -> list[int]:
        sizes = [0] * self.k
        for fold in self.fold_of.values():
            sizes[fold] += 1
        return sizes

    def items_in_fold(self, fold: int) -> list[str]:
        return [item_id for item_id, f in self.fold_of.items() if f == fold]


def _level_key(item, level: PartitionLevel) -> str:
    if level is PartitionLevel.ITEM:
        return item.item_id
    if level is PartitionLevel.GROUP:
        return item.group_id
    return item.supergroup_id


def assign_folds(
    manifest: Manifest,
    k: int,
    level: PartitionLevel,
    seed: int,
    stratify: bool = False,
) -> FoldAssignment:
    """Deterministically split the manifest into k folds at the given level.

    Item level: seeded shuffle then round-robin (optionally stratified by
    label). Group/supergroup level: unit keys are seeded-shuffled, then
    greedily assigned largest-first to the currently smallest fold, ties
    going to the lowest fold index.
    """
    level = PartitionLevel(level)
    if k < 2:
        raise PartitionError(f"k must be >= 2, got {k}")

    keys_in_order: list[str] = []
    members: dict[str, list[str]] = {}
    for item in manifest.items:
        key = _level_key(item, level)
        if key not in members:
            members[key] = []
            keys_in_order.append(key)
        members[key].append(item.item_id)
    if len(keys_in_order) < k:
        raise PartitionError(
            f"need at least {k} distinct {level.value} keys, found {len(keys_in_order)}"
        )

    rng = SplitMix64(derive_state("partition", level.value, k, seed))
    fold_of: dict[str, int] = {}

    if level is PartitionLevel.ITEM:
        cursor = 0
        if stratify:
            by_label: dict[str, list[str]] = {}
            for item in manifest.items:
                by_label.setdefault(item.label, []).append(item.item_id)
            buckets = list(by_label.values())
        else:
            buckets = [list(keys_in_order)]
        for bucket in buckets:
            rng.shuffle(bucket)
            for item_id in bucket:
                fold_of[item_id] = cursor % k
                cursor += 1
    else:
        rng.shuffle(keys_in_order)
        # Stable sort keeps the shuffled order among equal-size units.
        keys_in_order.sort(key=lambda key: -len(members[key]))
        sizes = [0] * k
        for key in keys_in_order:
            fold = min(range(k), key=lambda f: (sizes[f], f))
            sizes[fold] += len(members[key])
            for item_id in members[key]:
                fold_of[item_id] = fold

    # Reorder to manifest order so serialization is canonical.
    ordered = {item.item_id: fold_of[item.item_id] for item in manifest.items}
    return FoldAssignment(k=k, level=level, seed=seed, fold_of=ordered)


@dataclass(frozen=True)
class Violation:
    kind: str
    subject: str
    detail: str

    def __str__(self) -> str:
        return f"{self.kind}: {self.subject} ({self.detail})"


def check_integrity(
    assignment: FoldAssignment,
    manifest: Manifest,
    level: PartitionLevel | None = None,
) -> list[Violation]:
    """Report every invariant violation; an empty list means the split is sound.

    ``level`` overrides the level to check at (e.g. auditing an item-level
    split for group leakage).
    """
    level = PartitionLevel(level) if level is not None else assignment.level
    violations: list[Violation] = []

    manifest_ids = {item.item_id for item in manifest.items}
    for item_id in manifest_ids:
        if item_id not in assignment.fold_of:
            violations.append(Violation("missing-item", item_id, "no fold assigned"))
    for item_id, fold in assignment.fold_of.items():
        if item_id not in manifest_ids:
            violations.append(Violation("unknown-item", item_id, "not in manifest"))
        if not 0 <= fold < assignment.k:
            violations.append(
                Violation("fold-out-of-range", item_id, f"fold {fold} not in [0,{assignment.k})")
            )

    if level in (PartitionLevel.GROUP, PartitionLevel.SUPERGROUP):
        unit_folds: dict[str, set[int]] = {}
        for item in manifest.items:
            fold = assignment.fold_of.get(item.item_id)
            if fold is None:
                continue
            key = item.group_id if level is PartitionLevel.GROUP else item.supergroup_id
            unit_folds.setdefault(key, set()).add(fold)
        kind = "group-span" if level is PartitionLevel.GROUP else "supergroup-span"
        for key, folds in sorted(unit_folds.items()):
            if len(folds) > 1:
                violations.append(
                    Violation(kind, key, f"spans folds {sorted(folds)}")
                )

    in_range = all(0 <= fold < assignment.k for fold in assignment.fold_of.values())
    if in_range and level is PartitionLevel.ITEM and assignment.level is PartitionLevel.ITEM:
        sizes = assignment.fold_sizes()
        if sizes and max(sizes) - min(sizes) > 1:
            violations.append(
                Violation("imbalance", "folds", f"sizes {sizes} differ by more than 1")
            )
    return violations


_HEADER_RE = re.compile(r"^#\s*k=(\d+)\s+level=(\w+)\s+seed=(-?\d+)\s*$")


def dumps_assignment(assignment: FoldAssignment) -> str:
    out = io.StringIO()
    out.write(f"# k={assignment.k} level={assignment.level.value} seed={assignment.seed}\n")
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["item_id", "fold"])
    for item_id, fold in assignment.fold_of.items():
        writer.writerow([item_id, fold])
    return out.getvalue()


def save_assignment(assignment: FoldAssignment, path: str | Path) -> None:
    Path(path).write_text(dumps_assignment(assignment), encoding="utf-8")


def loads_assignment(text: str) -> FoldAssignment:
    lines = text.splitlines()
    if not lines:
        raise PartitionError("empty fold-assignment file")
    match = _HEADER_RE.match(lines[0])
    if not match:
        raise PartitionError("missing '# k=.. level=.. seed=..' header comment")
    k, level, seed = int(match.group(1)), match.group(2), int(match.group(3))
    reader = csv.reader(lines[1:])
    header = next(reader, None)
    if header != ["item_id", "fold"]:
        raise PartitionError("expected 'item_id,fold' column header")
    fold_of: dict[str, int] = {}
    for row in reader:
        if not row:
            continue
        if len(row) != 2:
            raise PartitionError(f"bad row: {row!r}")
        fold_of[row[0]] = int(row[1])
    return FoldAssignment(k=k, level=PartitionLevel(level), seed=seed, fold_of=fold_of)


def load_assignment(path: str | Path) -> FoldAssignment:
    return loads_assignment(Path(path).read_text(encoding="utf-8"))
