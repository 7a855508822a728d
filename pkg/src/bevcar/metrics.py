"""IoU accumulation, aggregate scores, range/condition breakdowns, runtime.

Intersections and unions are integer cell counts, so accumulators merge
exactly across samples, shards and processes.  Aggregates:

* ``map``  — mean IoU over the seven map classes,
* ``miou`` — mean of the vehicle IoU and the drivable-area IoU.

A class with an empty union has undefined IoU; it is reported as NaN and
excluded from the aggregate means (noted in the report).  Table values are
percentages rounded to one decimal, half away from zero.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, ROUND_HALF_UP, Decimal

import numpy as np

from .errors import ConfigurationError
from .geometry import BevGrid, cell_centers_2d
from .heads import CLASS_ORDER, MAP_CLASSES, VEHICLE_CLASS

CONDITIONS = ("day", "rain", "night")

# Euclidean distance bands (metres) from the grid origin, half-open [lo, hi).
DEFAULT_RANGE_BANDS = ((0.0, 20.0), (20.0, 35.0), (35.0, 50.0))


@dataclass
class IoUAccumulator:
    """Per-class integer intersection / union counters."""

    classes: tuple[str, ...] = CLASS_ORDER
    intersection: dict[str, int] = field(default_factory=dict)
    union: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for c in self.classes:
            self.intersection.setdefault(c, 0)
            self.union.setdefault(c, 0)

    def update(self, name: str, pred: np.ndarray, gt: np.ndarray,
               region: np.ndarray | None = None) -> None:
        """Accumulate one class over one sample.

        Args:
            pred, gt: boolean masks of identical shape.
            region: optional boolean mask restricting which cells count
                (valid mask, range band, ...).
        """
        if name not in self.intersection:
            raise ConfigurationError(f"unknown class {name!r}")
        pred = np.asarray(pred, dtype=bool)
        gt = np.asarray(gt, dtype=bool)
        if pred.shape != gt.shape:
            raise ConfigurationError(f"pred {pred.shape} vs gt {gt.shape}")
        if region is None:
            region = np.ones_like(pred)
        self.intersection[name] += int((pred & gt & region).sum())
        self.union[name] += int(((pred | gt) & region).sum())

    def merge(self, other: "IoUAccumulator") -> "IoUAccumulator":
        if self.classes != other.classes:
            raise ConfigurationError("cannot merge accumulators over different classes")
        out = IoUAccumulator(classes=self.classes)
        for c in self.classes:
            out.intersection[c] = self.intersection[c] + other.intersection[c]
            out.union[c] = self.union[c] + other.union[c]
        return out

    def iou(self, name: str) -> float:
        u = self.union[name]
        return float("nan") if u == 0 else self.intersection[name] / u


def round_percent(fraction: float) -> float:
    """Fraction -> percentage with one decimal, ties away from zero.

    Floats near a representable tie (e.g. 0.6495 stored as 0.64949999...)
    first snap to six decimals so the intended tie rounds up, not down.
    """
    if fraction != fraction:                     # NaN passes through
        return float("nan")
    d = Decimal(repr(float(fraction) * 100.0))
    d = d.quantize(Decimal("0.000001"), rounding=ROUND_HALF_EVEN)
    return float(d.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def summarize(acc: IoUAccumulator) -> dict:
    """Aggregate an accumulator into a report dict.

    Keys: ``iou`` (per-class fractions, NaN where undefined), ``map``,
    ``miou``, ``percent`` (rounded percentages for every entry) and
    ``undefined_classes``.
    """
    iou = {c: acc.iou(c) for c in acc.classes}
    undefined = [c for c in acc.classes if iou[c] != iou[c]]

    def defined_mean(names) -> float:
        vals = [iou[c] for c in names if c in iou and iou[c] == iou[c]]
        return float("nan") if not vals else sum(vals) / len(vals)

    map_score = defined_mean(MAP_CLASSES)
    miou = defined_mean((VEHICLE_CLASS, "drivable_area"))
    report = {
        "iou": iou,
        "map": map_score,
        "miou": miou,
        "undefined_classes": undefined,
    }
    report["percent"] = {**{c: round_percent(v) for c, v in iou.items()},
                         "map": round_percent(map_score),
                         "miou": round_percent(miou)}
    return report


# ---------------------------------------------------------------------------
# Range bands
# ---------------------------------------------------------------------------

def range_masks(grid: BevGrid,
                bands: tuple[tuple[float, float], ...] = DEFAULT_RANGE_BANDS) -> np.ndarray:
    """Boolean masks (num_bands, X, Y) selecting cells whose centre distance
    from the grid origin falls in each half-open band [lo, hi).  Cells beyond
    the last band belong to no mask."""
    for lo, hi in bands:
        if hi <= lo:
            raise ConfigurationError(f"empty range band [{lo}, {hi})")
    centers = cell_centers_2d(grid)
    dist = np.sqrt((centers ** 2).sum(axis=-1))
    return np.stack([(dist >= lo) & (dist < hi) for lo, hi in bands])


# ---------------------------------------------------------------------------
# Condition splits
# ---------------------------------------------------------------------------

@dataclass
class ConditionSplit:
    """Maps each sample token to exactly one condition."""

    tokens: dict[str, tuple[str, ...]]     # condition -> tokens

    def __post_init__(self) -> None:
        seen: dict[str, str] = {}
        for cond, toks in self.tokens.items():
            if cond not in CONDITIONS:
                raise ConfigurationError(f"unknown condition {cond!r}; "
                                         f"expected one of {CONDITIONS}")
            for t in toks:
                if t in seen:
                    raise ConfigurationError(
                        f"token {t!r} assigned to both {seen[t]!r} and {cond!r}")
                seen[t] = cond
        self.tokens = {c: tuple(self.tokens.get(c, ())) for c in CONDITIONS}

    def condition_of(self, token: str) -> str | None:
        for cond, toks in self.tokens.items():
            if token in toks:
                return cond
        return None

    @property
    def counts(self) -> dict[str, int]:
        return {c: len(t) for c, t in self.tokens.items()}

    def all_tokens(self) -> list[str]:
        return [t for c in CONDITIONS for t in self.tokens[c]]


# ---------------------------------------------------------------------------
# Runtime
# ---------------------------------------------------------------------------

@dataclass
class RuntimeReport:
    ms: float           # median latency, milliseconds
    fps: float          # 1000 / ms
    samples: tuple[float, ...]


def measure_runtime(fn, argument, repetitions: int, warmup: int = 1) -> RuntimeReport:
    """Median wall-clock latency of ``fn(argument)`` over ``repetitions`` runs.

    Only the call itself is timed — callers are expected to have built and
    warmed the model, and to keep ingestion/losses outside ``fn``.
    """
    if repetitions <= 0:
        raise ConfigurationError("repetitions must be positive")
    for _ in range(warmup):
        fn(argument)
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        fn(argument)
        times.append((time.perf_counter() - t0) * 1000.0)
    ms = float(np.median(times))
    return RuntimeReport(ms=ms, fps=1000.0 / ms if ms > 0 else float("inf"),
                         samples=tuple(times))
