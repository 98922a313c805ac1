"""Deterministic synthetic datasets for demos and tests.

Items get gaussian feature blobs (one well-separated center per class) and a
group/supergroup hierarchy, all driven by the counter-based generator so the
same seed always yields the same manifest.
"""

from __future__ import annotations

import math

from .manifest import DataItem, Manifest, build_manifest
from .rng import SplitMix64, derive_state


def _gaussian(rng: SplitMix64) -> float:
    # Box-Muller; one draw per call keeps the stream simple to reason about
    u1 = max(rng.next_float(), 1e-12)
    u2 = rng.next_float()
    return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


def make_manifest(
    n_groups: int = 24,
    items_per_group: int = 5,
    n_supergroups: int = 6,
    n_classes: int = 2,
    feature_dim: int = 2,
    separation: float = 4.0,
    noise: float = 1.0,
    seed: int = 0,
) -> Manifest:
    """Grouped, labeled, feature-bearing manifest.

    Every group carries one class (items in a group are correlated by
    construction, which is the whole point of group-level partitioning) and
    groups are dealt round-robin onto supergroups. Class centers sit on
    scaled one-hot corners, `separation` apart, so a linear model can reach
    high accuracy when `separation` well exceeds `noise`.
    """
    if n_classes < 2 or feature_dim < n_classes - 1:
        raise ValueError("need n_classes >= 2 and feature_dim >= n_classes - 1")
    rng = SplitMix64(derive_state("synthetic", seed))
    items: list[DataItem] = []
    for g in range(n_groups):
        label_index = g % n_classes
        # floor-divide first so each supergroup sees every class
        supergroup = f"s{(g // n_classes) % n_supergroups}"
        for offset in range(items_per_group):
            center = [0.0] * feature_dim
            if label_index > 0:
                center[label_index - 1] = separation
            features = tuple(c + noise * _gaussian(rng) for c in center)
            items.append(
                DataItem(
                    item_id=f"item{g * items_per_group + offset:04d}",
                    group_id=f"g{g:03d}",
                    supergroup_id=supergroup,
                    label=f"class{label_index}",
                    features=features,
                )
            )
    return build_manifest(items)


def make_item_manifest(n_items: int = 100, n_classes: int = 2, seed: int = 0) -> Manifest:
    """Featureless item-level manifest (each item is its own group)."""
    items = [
        DataItem(
            item_id=f"item{i:04d}",
            group_id=f"item{i:04d}",
            supergroup_id=f"item{i:04d}",
            label=f"class{i % n_classes}",
        )
        for i in range(n_items)
    ]
    return build_manifest(items)
