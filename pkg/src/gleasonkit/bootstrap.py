"""Non-parametric percentile bootstrap with per-replicate seed streams."""
from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from .errors import UndefinedMetricError, ValidationError

N_BOOT = 1000
UNSTABLE_SHARE = 0.5


@dataclass(frozen=True)
class MetricEstimate:
    value: float
    ci_lower: float
    ci_upper: float
    n: int
    n_boot: int
    seed: int
    n_undefined: int = 0
    unstable: bool = False
    note: str = ""

    @property
    def defined(self):
        return not math.isnan(self.value)

    def to_dict(self):
        return asdict(self)


def derive_seed(seed: int, *names) -> int:
    """Deterministic child seed for a named sub-stream (e.g. ``"bootstrap", "region"``)."""
    key = tuple(zlib.crc32(str(n).encode()) for n in names)
    return int(np.random.SeedSequence(int(seed), spawn_key=key).generate_state(1, np.uint64)[0] >> 1)


def replicate_indices(n: int, n_boot: int, seed: int):
    """Yield resampling index arrays; replicate ``b`` uses its own stream keyed by ``(seed, b)``."""
    for b in range(n_boot):
        rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(b,)))
        yield rng.integers(0, n, size=n)


def _n_rows(data):
    if isinstance(data, (tuple, list)):
        lens = {len(col) for col in data}
        if len(lens) != 1:
            raise ValidationError("bootstrap columns must have equal length")
        return lens.pop()
    return len(data)


def _take(data, idx):
    if isinstance(data, (tuple, list)):
        return tuple(np.asarray(col)[idx] for col in data)
    return np.asarray(data)[idx]


def _call(metric, data):
    if isinstance(data, tuple):
        return metric(*data)
    return metric(data)


def bootstrap_many(metrics, data, n_boot=N_BOOT, seed=0):
    """Bootstrap several metrics on the same resamples.

    ``metrics`` maps names to callables. ``data`` is either one array (rows
    resampled) or a tuple of aligned columns, which are passed to each metric
    as positional arguments. Returns ``{name: MetricEstimate}``.
    """
    n = _n_rows(data)
    if n == 0:
        raise ValidationError("bootstrap needs non-empty data")
    if isinstance(data, list):
        data = tuple(data)
    points = {}
    for name, fn in metrics.items():
        try:
            points[name] = float(_call(fn, data))
        except UndefinedMetricError as exc:
            points[name] = exc
    live = [k for k, v in points.items() if not isinstance(v, Exception)]
    reps = {k: [] for k in live}
    undefined = dict.fromkeys(live, 0)
    if live:
        for idx in replicate_indices(n, n_boot, seed):
            sample = _take(data, idx)
            for name in live:
                try:
                    reps[name].append(float(_call(metrics[name], sample)))
                except UndefinedMetricError:
                    undefined[name] += 1
    out = {}
    for name, point in points.items():
        if isinstance(point, Exception):
            out[name] = MetricEstimate(math.nan, math.nan, math.nan, n, n_boot, seed,
                                       n_boot, True, f"undefined: {point}")
            continue
        vals = np.asarray(reps[name])
        if len(vals):
            lo, hi = np.percentile(vals, [2.5, 97.5])
        else:
            lo = hi = math.nan
        unstable = undefined[name] > UNSTABLE_SHARE * n_boot
        note = f"{undefined[name]} undefined replicates" if undefined[name] else ""
        out[name] = MetricEstimate(point, float(lo), float(hi), n, n_boot, seed,
                                   undefined[name], unstable, note)
    return out


def bootstrap_ci(metric, data, n_boot=N_BOOT, seed=0) -> MetricEstimate:
    """Percentile 95% CI of ``metric`` over ``n_boot`` row resamples of ``data``."""
    return bootstrap_many({"m": metric}, data, n_boot, seed)["m"]
