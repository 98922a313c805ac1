"""Hyperparameter search space and random-search sampling.

Choices are categorical; numeric choices are carried as decimal strings so a
configuration's identity never depends on platform float parsing. Sampling is
plain independent random search: each configuration draws one choice per axis,
and duplicate configurations are legal (they simply get trained again).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

from .rng import SplitMix64, derive_state


class SpaceError(Exception):
    pass


def _canonical_choice(value) -> str:
    if isinstance(value, bool):
        raise SpaceError("boolean choices are ambiguous; use explicit strings")
    if isinstance(value, (int, float)):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class SearchSpace:
    """Ordered categorical axes: (name, choices) with choices as strings."""

    axes: tuple[tuple[str, tuple[str, ...]], ...]

    def __post_init__(self):
        names = [name for name, _ in self.axes]
        if len(set(names)) != len(names):
            raise SpaceError("axis names must be unique")
        for name, choices in self.axes:
            if not choices:
                raise SpaceError(f"axis {name!r} has no choices")

    @classmethod
    def from_axes(cls, axes) -> "SearchSpace":
        """Build from (name, choices) pairs; numeric choices are canonicalized."""
        normalized = tuple(
            (str(name), tuple(_canonical_choice(c) for c in choices)) for name, choices in axes
        )
        return cls(axes=normalized)

    def axis_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.axes)

    def choices(self, name: str) -> tuple[str, ...]:
        for axis_name, choices in self.axes:
            if axis_name == name:
                return choices
        raise SpaceError(f"unknown axis {name!r}")

    def size(self) -> int:
        total = 1
        for _, choices in self.axes:
            total *= len(choices)
        return total


@dataclass(frozen=True)
class HyperparameterConfig:
    """One sampled or loaded configuration; values keyed by axis name."""

    index: int
    values: tuple[tuple[str, str], ...]

    def value(self, name: str) -> str:
        for key, val in self.values:
            if key == name:
                return val
        raise KeyError(name)

    def get(self, name: str, default: str | None = None) -> str | None:
        for key, val in self.values:
            if key == name:
                return val
        return default

    def as_dict(self) -> dict[str, str]:
        return dict(self.values)


def default_search_space() -> SearchSpace:
    """Built-in six-axis CNN training space.

    Batch sizes are powers of two from 16 to 128, learning rate and decay are
    powers of ten from 1e-2 down to 1e-4, momentum covers 0.5/0.9/0.99 with or
    without Nesterov acceleration, and three backbone architectures are
    offered. 3*4*3*3*3*2 = 648 possible configurations.
    """
    return SearchSpace(
        axes=(
            ("architecture", ("ResNet50", "InceptionV3", "Xception")),
            ("batch_size", ("16", "32", "64", "128")),
            ("learning_rate", ("0.01", "0.001", "0.0001")),
            ("decay", ("0.01", "0.001", "0.0001")),
            ("momentum", ("0.5", "0.9", "0.99")),
            ("nesterov", ("enabled", "disabled")),
        )
    )


def sample_configs(space: SearchSpace, n: int, seed: int) -> list[HyperparameterConfig]:
    """Draw n configurations; configuration j uses its own stream keyed by (seed, j)."""
    if n < 1:
        raise SpaceError(f"n must be >= 1, got {n}")
    configs = []
    for j in range(n):
        rng = SplitMix64(derive_state(seed, j))
        values = tuple(
            (name, choices[rng.next_below(len(choices))]) for name, choices in space.axes
        )
        configs.append(HyperparameterConfig(index=j, values=values))
    return configs


def validate_config(config: HyperparameterConfig, space: SearchSpace) -> None:
    axis_names = space.axis_names()
    config_names = tuple(name for name, _ in config.values)
    for name in config_names:
        if name not in axis_names:
            raise SpaceError(f"config {config.index}: unknown axis {name!r}")
    for name in axis_names:
        if name not in config_names:
            raise SpaceError(f"config {config.index}: missing axis {name!r}")
    for name, value in config.values:
        if value not in space.choices(name):
            raise SpaceError(
                f"config {config.index}: value {value!r} not a choice of axis {name!r}"
            )


def load_configs(path: str | Path, space: SearchSpace | None = None) -> list[HyperparameterConfig]:
    """Read an explicit configuration list (CSV: index column plus one column per axis)."""
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        return []
    if not header or header[0] != "index":
        raise SpaceError("config list must start with an 'index' column")
    axis_names = header[1:]
    configs: list[HyperparameterConfig] = []
    seen: set[int] = set()
    for row_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise SpaceError(f"row {row_no}: expected {len(header)} fields, got {len(row)}")
        try:
            index = int(row[0])
        except ValueError:
            raise SpaceError(f"row {row_no}: bad index {row[0]!r}") from None
        if index in seen:
            raise SpaceError(f"row {row_no}: duplicate index {index}")
        seen.add(index)
        values = tuple(zip(axis_names, row[1:]))
        configs.append(HyperparameterConfig(index=index, values=values))
    if space is not None:
        for config in configs:
            validate_config(config, space)
    return configs


def save_configs(configs: list[HyperparameterConfig], path: str | Path) -> None:
    if not configs:
        Path(path).write_text("", encoding="utf-8")
        return
    axis_names = [name for name, _ in configs[0].values]
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["index", *axis_names])
    for config in configs:
        values = config.as_dict()
        writer.writerow([config.index, *(values[name] for name in axis_names)])
    Path(path).write_text(out.getvalue(), encoding="utf-8")
