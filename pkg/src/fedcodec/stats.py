"""Streaming per-cell mean/std estimation over adapter gradients.

One scalar (mean, std) pair is kept per (part, module, layer, epoch) cell,
where part is "A" or "B". Each epoch contributes exactly one observation
per (part, module, layer), and the recursions chain across epochs:

    m_e = beta1 * m_{e-1} + (1 - beta1) * mean(g_e)
    v_e = clamp(mean((g_e - m_e)^2), h1, h2)
    s_e = sqrt(beta2 * s_{e-1}^2 + (1 - beta2) * v_e)

with m_{-1} = s_{-1} = 0. The clamp keeps the variance estimate away from
degenerate scales before it enters the std recursion. An elementwise mode
keeps per-entry arrays instead of scalars; it is non-default and exists
for ablation only.
"""

import dataclasses
import json
import math
from typing import Iterable, Mapping

import numpy as np

from .errors import StatsFormatError
from .lora import LoraGrad

PARTS = ("A", "B")

# cell key: (part, module_tag, layer, epoch)
Key = tuple[str, str, int, int]


def update_mean(m_prev: float, grad, beta1: float) -> float:
    """One step of the gradient-mean recursion."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.size == 0:
        raise ValueError("gradient observation must be nonempty")
    return float(beta1 * m_prev + (1.0 - beta1) * np.mean(grad))


def update_variance(grad, m_new: float, h1: float, h2: float) -> float:
    """Mean squared deviation from the fresh mean, clamped into [h1, h2]."""
    v = float(np.mean((np.asarray(grad, dtype=np.float64) - m_new) ** 2))
    return min(max(v, h1), h2)


def update_std(s_prev: float, v: float, beta2: float) -> float:
    """One step of the std recursion on the clamped variance observation."""
    return math.sqrt(beta2 * s_prev**2 + (1.0 - beta2) * v)


@dataclasses.dataclass(frozen=True)
class EstimatorHyper:
    """Recursion coefficients and the two-sided variance clamp."""

    beta1: float = 0.99
    beta2: float = 0.9
    h1: float = 1e-5
    h2: float = 1e-3

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if not (0.0 < self.h1 <= self.h2):
            raise ValueError("need 0 < h1 <= h2")


@dataclasses.dataclass(frozen=True)
class GridShape:
    """Declared extent of the stats grid."""

    layers: int
    module_tags: tuple[str, ...]
    epochs: int
    parts: int = 2

    def __post_init__(self):
        tags = tuple(self.module_tags)
        if self.layers < 1 or self.epochs < 1 or len(tags) < 1:
            raise ValueError("grid must have at least one layer/module/epoch")
        if len(set(tags)) != len(tags):
            raise ValueError("module tags must be distinct")
        if any(not isinstance(t, str) or not t for t in tags):
            raise ValueError("module tags must be nonempty strings")
        if self.parts != 2:
            raise ValueError("parts is fixed at 2 (A and B)")
        object.__setattr__(self, "module_tags", tags)

    @property
    def modules(self) -> int:
        return len(self.module_tags)

    def cell_count(self) -> int:
        return self.parts * self.modules * self.layers * self.epochs


@dataclasses.dataclass(frozen=True, eq=False)
class StatCell:
    mean: float | np.ndarray
    std: float | np.ndarray

    def __eq__(self, other):
        if not isinstance(other, StatCell):
            return NotImplemented
        return _val_eq(self.mean, other.mean) and _val_eq(self.std, other.std)


def _val_eq(x, y) -> bool:
    xa, ya = np.asarray(x), np.asarray(y)
    return xa.shape == ya.shape and bool(np.array_equal(xa, ya))


class StatsBundle:
    """Immutable collection of stat cells plus grid metadata.

    Bundles are value-semantic: ingest_epoch returns a new bundle and
    deserialize(serialize(b)) compares equal to b.
    """

    def __init__(
        self,
        hyper: EstimatorHyper,
        shape: GridShape,
        cells: Mapping[Key, StatCell] | None = None,
        client_id: str | None = None,
        elementwise: bool = False,
    ):
        self.hyper = hyper
        self.shape = shape
        self.cells: dict[Key, StatCell] = dict(cells or {})
        self.client_id = client_id
        self.elementwise = bool(elementwise)
        for key in self.cells:
            self._check_key(key)

    def _check_key(self, key: Key):
        part, tag, layer, epoch = key
        if part not in PARTS:
            raise ValueError(f"unknown part {part!r}")
        if tag not in self.shape.module_tags:
            raise ValueError(f"module tag {tag!r} not in declared grid")
        if not (0 <= layer < self.shape.layers):
            raise ValueError(f"layer {layer} outside declared grid")
        if not (0 <= epoch < self.shape.epochs):
            raise ValueError(f"epoch {epoch} outside declared grid")

    @property
    def epochs_ingested(self) -> int:
        if not self.cells:
            return 0
        return 1 + max(k[3] for k in self.cells)

    def is_complete(self) -> bool:
        return len(self.cells) == self.shape.cell_count()

    def scalar_count(self) -> int:
        """Scalars a transmitted bundle carries (mean and std per cell)."""
        total = 0
        for cell in self.cells.values():
            total += 2 * int(np.asarray(cell.mean).size)
        return total

    def cell(self, part: str, tag: str, layer: int, epoch: int) -> StatCell:
        return self.cells[(part, tag, layer, epoch)]

    def __eq__(self, other):
        if not isinstance(other, StatsBundle):
            return NotImplemented
        return (
            self.hyper == other.hyper
            and self.shape == other.shape
            and self.client_id == other.client_id
            and self.elementwise == other.elementwise
            and self.cells == other.cells
        )

    def __repr__(self):
        return (
            f"StatsBundle(shape={self.shape}, cells={len(self.cells)}, "
            f"client_id={self.client_id!r}, elementwise={self.elementwise})"
        )


def ingest_epoch(bundle: StatsBundle, grads: Iterable[LoraGrad]) -> StatsBundle:
    """Fold one epoch of gradient observations into a bundle.

    The iterable must cover every (module, layer) of the declared grid
    exactly once, all tagged with the bundle's next unfilled epoch.
    Returns a new bundle; the input is not mutated.
    """
    grads = list(grads)
    if not grads:
        raise ValueError("epoch must contain at least one gradient")
    epoch = grads[0].epoch
    expected = bundle.epochs_ingested
    if epoch != expected:
        raise ValueError(f"expected epoch {expected}, got {epoch}")
    if epoch >= bundle.shape.epochs:
        raise ValueError(f"epoch {epoch} outside declared grid")

    seen: set[tuple[str, int]] = set()
    new_cells = dict(bundle.cells)
    for g in grads:
        if g.epoch != epoch:
            raise ValueError("mixed epochs in a single ingest")
        if g.module_tag not in bundle.shape.module_tags:
            raise ValueError(f"module tag {g.module_tag!r} not in grid")
        if not (0 <= g.layer < bundle.shape.layers):
            raise ValueError(f"layer {g.layer} outside declared grid")
        spot = (g.module_tag, g.layer)
        if spot in seen:
            raise ValueError(f"duplicate observation for {spot}")
        seen.add(spot)
        for part, tensor in (("A", g.a), ("B", g.b)):
            key = (part, g.module_tag, g.layer, epoch)
            prev_key = (part, g.module_tag, g.layer, epoch - 1)
            if epoch == 0:
                m_prev, s_prev = 0.0, 0.0
            else:
                prev = bundle.cells[prev_key]
                m_prev, s_prev = prev.mean, prev.std
            h = bundle.hyper
            if bundle.elementwise:
                m_new = h.beta1 * np.asarray(m_prev) + (1.0 - h.beta1) * tensor
                v = np.clip((tensor - m_new) ** 2, h.h1, h.h2)
                s_new = np.sqrt(h.beta2 * np.asarray(s_prev) ** 2 + (1.0 - h.beta2) * v)
            else:
                m_new = update_mean(m_prev, tensor, h.beta1)
                v = update_variance(tensor, m_new, h.h1, h.h2)
                s_new = update_std(s_prev, v, h.beta2)
            new_cells[key] = StatCell(mean=m_new, std=s_new)

    missing = {
        (tag, layer)
        for tag in bundle.shape.module_tags
        for layer in range(bundle.shape.layers)
    } - seen
    if missing:
        raise ValueError(f"epoch {epoch} missing observations for {sorted(missing)}")

    return StatsBundle(
        hyper=bundle.hyper,
        shape=bundle.shape,
        cells=new_cells,
        client_id=bundle.client_id,
        elementwise=bundle.elementwise,
    )


# ---------------------------------------------------------------------------
# serialization


def _cell_to_json(key: Key, cell: StatCell) -> dict:
    part, tag, layer, epoch = key

    def cook(v):
        arr = np.asarray(v)
        return arr.tolist() if arr.ndim else float(arr)

    return {
        "part": part,
        "module": tag,
        "layer": layer,
        "epoch": epoch,
        "mean": cook(cell.mean),
        "std": cook(cell.std),
    }


def serialize_stats(bundle: StatsBundle) -> str:
    """Render a bundle as a JSON document. Floats keep full precision."""
    tag_index = {t: i for i, t in enumerate(bundle.shape.module_tags)}
    ordered = sorted(
        bundle.cells.items(),
        key=lambda kv: (kv[0][3], kv[0][2], tag_index[kv[0][1]], kv[0][0]),
    )
    doc = {
        "hyper": {
            "beta1": bundle.hyper.beta1,
            "beta2": bundle.hyper.beta2,
            "h1": bundle.hyper.h1,
            "h2": bundle.hyper.h2,
        },
        "shape": {
            "layers": bundle.shape.layers,
            "modules": bundle.shape.modules,
            "parts": bundle.shape.parts,
            "epochs": bundle.shape.epochs,
            "module_tags": list(bundle.shape.module_tags),
        },
        "provenance": {
            "client_id": bundle.client_id,
            "elementwise": bundle.elementwise,
        },
        "cells": [_cell_to_json(k, c) for k, c in ordered],
    }
    return json.dumps(doc, indent=2)


def _require_keys(obj: dict, keys: set[str], where: str):
    if set(obj) != keys:
        extra = set(obj) - keys
        missing = keys - set(obj)
        parts = []
        if extra:
            parts.append(f"unknown keys {sorted(extra)}")
        if missing:
            parts.append(f"missing keys {sorted(missing)}")
        raise StatsFormatError(f"{where}: " + ", ".join(parts))


def deserialize_stats(text: str) -> StatsBundle:
    """Parse a serialized bundle, failing with a character offset on bad JSON."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise StatsFormatError(f"invalid JSON at offset {e.pos}: {e.msg}") from e
    if not isinstance(doc, dict):
        raise StatsFormatError("document root must be an object")
    _require_keys(doc, {"hyper", "shape", "provenance", "cells"}, "document")
    _require_keys(doc["hyper"], {"beta1", "beta2", "h1", "h2"}, "hyper")
    _require_keys(
        doc["shape"], {"layers", "modules", "parts", "epochs", "module_tags"}, "shape"
    )
    _require_keys(doc["provenance"], {"client_id", "elementwise"}, "provenance")

    try:
        hyper = EstimatorHyper(**doc["hyper"])
        shape = GridShape(
            layers=doc["shape"]["layers"],
            module_tags=tuple(doc["shape"]["module_tags"]),
            epochs=doc["shape"]["epochs"],
            parts=doc["shape"]["parts"],
        )
    except (TypeError, ValueError) as e:
        raise StatsFormatError(f"bad hyper/shape values: {e}") from e
    if doc["shape"]["modules"] != shape.modules:
        raise StatsFormatError("shape.modules disagrees with module_tags length")

    elementwise = doc["provenance"]["elementwise"]
    if not isinstance(elementwise, bool):
        raise StatsFormatError("provenance.elementwise must be a boolean")

    cells: dict[Key, StatCell] = {}
    if not isinstance(doc["cells"], list):
        raise StatsFormatError("cells must be a list")
    for i, raw in enumerate(doc["cells"]):
        if not isinstance(raw, dict):
            raise StatsFormatError(f"cells[{i}] must be an object")
        _require_keys(raw, {"part", "module", "layer", "epoch", "mean", "std"}, f"cells[{i}]")

        def cook(v, what):
            if isinstance(v, bool) or not isinstance(v, (int, float, list)):
                raise StatsFormatError(f"cells[{i}].{what} must be numeric")
            arr = np.asarray(v, dtype=np.float64)
            if elementwise != (arr.ndim > 0):
                kind = "array" if elementwise else "scalar"
                raise StatsFormatError(f"cells[{i}].{what} must be a {kind}")
            return arr if arr.ndim else float(arr)

        key = (raw["part"], raw["module"], raw["layer"], raw["epoch"])
        if key in cells:
            raise StatsFormatError(f"cells[{i}] duplicates key {key}")
        cells[key] = StatCell(mean=cook(raw["mean"], "mean"), std=cook(raw["std"], "std"))

    try:
        return StatsBundle(
            hyper=hyper,
            shape=shape,
            cells=cells,
            client_id=doc["provenance"]["client_id"],
            elementwise=elementwise,
        )
    except ValueError as e:
        raise StatsFormatError(str(e)) from e
