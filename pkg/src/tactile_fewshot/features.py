"""386-D handcrafted feature pool and its provenance catalog.

Layout (fixed order):

* 4 channels x 48 time statistics   -> 192
* 2 inter-channel correlations       -> 2    (ch1/ch2 PVDF pair, ch3/ch4 SG pair)
* 2 PVDF channels x 4 DWT sub-bands x 24 sub-band statistics -> 192

Degenerate inputs never produce NaN. A signal counts as constant when its
standard deviation is at most ``1e-10 * max|x|``; ratio statistics whose
denominator vanishes (skewness, kurtosis, crest/shape/impulse/clearance
factors, Hjorth mobility/complexity, autocorrelations, trend r^2, relative
energy) are then defined as 0. Histogram entropy uses 16 equal-width bins
over the signal's own range and is 0 for an empty range.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .dataset import TactileDataset, TactileTrial
from .dwt import SUBBANDS, dwt3

TIME_STATS = (
    "mean", "std", "var", "rms", "max", "min", "ptp", "mean_abs",
    "median", "mad", "iqr", "skewness", "kurtosis", "energy", "zcr", "ssc",
    "waveform_length", "crest_factor", "shape_factor", "impulse_factor", "clearance_factor",
    "hjorth_activity", "hjorth_mobility", "hjorth_complexity", "hist_entropy",
    "p01", "p05", "p10", "p25", "p75", "p90", "p99",
    "acf_lag1", "acf_lag5", "acf_lag25",
    "mean_crossing_rate", "diff_mean_abs", "diff_std", "diff_max_abs", "diff2_mean_abs",
    "mean_abs_dev", "frac_above_mean", "longest_strike_above_mean",
    "trend_slope", "trend_r2", "peak_rate", "argmax_frac", "energy_ratio_halves",
)

SUBBAND_STATS = (
    "mean", "std", "rms", "max", "min", "ptp", "mean_abs", "median", "mad", "iqr",
    "skewness", "kurtosis", "energy", "zcr", "ssc", "waveform_length", "crest_factor",
    "hjorth_mobility", "hjorth_complexity", "hist_entropy", "acf_lag1", "p90",
)
FREQ_STATS = SUBBAND_STATS + ("rel_energy", "log_energy")

N_TIME = 4 * len(TIME_STATS) + 2
N_FREQ = 2 * len(SUBBANDS) * len(FREQ_STATS)
N_FEATURES = N_TIME + N_FREQ
HIST_BINS = 16
_PERCENTILES = {"p01": 1, "p05": 5, "p10": 10, "p25": 25, "p75": 75, "p90": 90, "p99": 99}
_ACF_LAGS = {"acf_lag1": 1, "acf_lag5": 5, "acf_lag25": 25}

assert len(TIME_STATS) == 48 and len(FREQ_STATS) == 24 and N_FEATURES == 386


class VersionError(ValueError):
    """Standardizer and features come from different catalogs."""


@dataclass(frozen=True)
class FeatureEntry:
    index: int
    name: str
    source_channel: str
    sensor_kind: str  # PVDF | SG | Cross
    domain: str  # Time | Frequency
    subband: str  # none | A3 | D3 | D2 | D1


@dataclass(frozen=True)
class FeatureCatalog:
    entries: tuple[FeatureEntry, ...]
    wavelet: str = "db4"
    version: str = field(default="")

    def __post_init__(self):
        if not self.version:
            digest = hashlib.sha1(("|".join(e.name for e in self.entries) + self.wavelet).encode()).hexdigest()[:10]
            object.__setattr__(self, "version", f"tf386-{digest}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def sensor_kinds(self) -> np.ndarray:
        return np.array([e.sensor_kind for e in self.entries])

    def counts(self) -> dict[tuple[str, str], int]:
        out: dict[tuple[str, str], int] = {}
        for e in self.entries:
            out[(e.sensor_kind, e.domain)] = out.get((e.sensor_kind, e.domain), 0) + 1
        return out

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "wavelet": self.wavelet,
            "entries": [e.__dict__ for e in self.entries],
        }


def build_catalog(wavelet: str = "db4") -> FeatureCatalog:
    entries = []
    for ch in range(1, 5):
        kind = "PVDF" if ch <= 2 else "SG"
        for stat in TIME_STATS:
            entries.append(FeatureEntry(len(entries), f"ch{ch}_{stat}", str(ch), kind, "Time", "none"))
    entries.append(FeatureEntry(len(entries), "corr_ch1_ch2", "1-2", "Cross", "Time", "none"))
    entries.append(FeatureEntry(len(entries), "corr_ch3_ch4", "3-4", "Cross", "Time", "none"))
    for ch in (1, 2):
        for band in SUBBANDS:
            for stat in FREQ_STATS:
                entries.append(FeatureEntry(len(entries), f"ch{ch}_{band}_{stat}", str(ch), "PVDF", "Frequency", band))
    return FeatureCatalog(tuple(entries), wavelet)


DEFAULT_CATALOG = build_catalog()


# ---------------------------------------------------------------------------
# row-wise statistics


def _safe_div(num, den, ok):
    out = np.zeros(np.broadcast(num, den).shape)
    np.divide(num, den, out=out, where=ok)
    return out


def _longest_run(mask: np.ndarray) -> np.ndarray:
    """Length of the longest run of True per row."""
    m = mask.astype(np.int8)
    rows, n = m.shape
    padded = np.zeros((rows, n + 2), dtype=np.int8)
    padded[:, 1:-1] = m
    d = np.diff(padded, axis=1)
    best = np.zeros(rows)
    r_start, c_start = np.nonzero(d == 1)
    r_end, c_end = np.nonzero(d == -1)
    # starts and ends pair up in row-major order
    lengths = c_end - c_start
    np.maximum.at(best, r_start, lengths)
    return best


def _hist_entropy(x, lo, hi):
    rows, n = x.shape
    span = hi - lo
    ok = span > 0
    scale = _safe_div(HIST_BINS, span, ok)
    idx = np.floor((x - lo[:, None]) * scale[:, None]).astype(np.int64)
    np.clip(idx, 0, HIST_BINS - 1, out=idx)
    flat = idx + HIST_BINS * np.arange(rows)[:, None]
    counts = np.bincount(flat.ravel(), minlength=rows * HIST_BINS).reshape(rows, HIST_BINS)
    p = counts / n
    logp = np.log(p, out=np.zeros_like(p), where=p > 0)
    return np.where(ok, -(p * logp).sum(axis=1), 0.0)


# homogeneity degree: stat(c * x) = |c|**k * stat(x) for c > 0; the rest are scale-free
_DEGREE_1 = frozenset({
    "mean", "std", "rms", "max", "min", "ptp", "mean_abs", "median", "mad", "iqr",
    "waveform_length", "diff_mean_abs", "diff_std", "diff_max_abs", "diff2_mean_abs",
    "mean_abs_dev", "trend_slope", *_PERCENTILES,
})
_DEGREE_2 = frozenset({"var", "hjorth_activity", "energy"})


def row_stats(x: np.ndarray, names: tuple[str, ...] = TIME_STATS) -> np.ndarray:
    """Compute the named statistics for every row of ``x``; returns ``(rows, len(names))``.

    Each row is divided by its largest magnitude first and scale-dependent
    statistics are multiplied back, so tiny or huge signals neither underflow
    nor overflow in the intermediate powers.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    maxabs = np.abs(x).max(axis=1)
    s = np.where(maxabs > 0, maxabs, 1.0)
    out = _unit_row_stats(x / s[:, None], names)
    for j, name in enumerate(names):
        if name in _DEGREE_1:
            out[:, j] *= s
        elif name in _DEGREE_2:
            out[:, j] *= s * s
    return out


def _unit_row_stats(x: np.ndarray, names: tuple[str, ...]) -> np.ndarray:
    rows, n = x.shape
    mu = x.mean(axis=1)
    xc = x - mu[:, None]
    m2 = (xc**2).mean(axis=1)
    std = np.sqrt(m2)
    absx = np.abs(x)
    maxabs = absx.max(axis=1)
    ok = std > 1e-10 * maxabs
    mx, mn = x.max(axis=1), x.min(axis=1)
    energy = (x**2).sum(axis=1)
    rms = np.sqrt(energy / n)
    mean_abs = absx.mean(axis=1)
    d1 = np.diff(x, axis=1)
    d2 = np.diff(x, n=2, axis=1)
    var_d1 = d1.var(axis=1)
    var_d2 = d2.var(axis=1)
    q = np.percentile(x, [1, 5, 10, 25, 50, 75, 90, 99], axis=1)
    pct = dict(zip(("p01", "p05", "p10", "p25", "median", "p75", "p90", "p99"), q))
    cache: dict[str, np.ndarray] = {}

    def mobility():
        if "mob" not in cache:
            cache["mob"] = np.sqrt(_safe_div(var_d1, m2, ok))
        return cache["mob"]

    out = np.empty((rows, len(names)))
    for j, name in enumerate(names):
        if name == "mean":
            v = mu
        elif name == "std":
            v = std
        elif name in ("var", "hjorth_activity"):
            v = m2
        elif name == "rms":
            v = rms
        elif name == "max":
            v = mx
        elif name == "min":
            v = mn
        elif name == "ptp":
            v = mx - mn
        elif name == "mean_abs":
            v = mean_abs
        elif name in pct:
            v = pct[name]
        elif name == "mad":
            v = np.median(np.abs(x - pct["median"][:, None]), axis=1)
        elif name == "iqr":
            v = pct["p75"] - pct["p25"]
        elif name == "skewness":
            v = _safe_div((xc**3).mean(axis=1), m2**1.5, ok)
        elif name == "kurtosis":
            v = np.where(ok, _safe_div((xc**4).mean(axis=1), m2**2, ok) - 3.0, 0.0)
        elif name == "energy":
            v = energy
        elif name == "zcr":
            v = (x[:, :-1] * x[:, 1:] < 0).sum(axis=1) / (n - 1)
        elif name == "ssc":
            v = ((x[:, 1:-1] - x[:, :-2]) * (x[:, 1:-1] - x[:, 2:]) > 0).sum(axis=1) / (n - 2)
        elif name == "waveform_length":
            v = np.abs(d1).sum(axis=1)
        elif name == "crest_factor":
            v = _safe_div(maxabs, rms, rms > 0)
        elif name == "shape_factor":
            v = _safe_div(rms, mean_abs, mean_abs > 0)
        elif name == "impulse_factor":
            v = _safe_div(maxabs, mean_abs, mean_abs > 0)
        elif name == "clearance_factor":
            den = np.sqrt(absx).mean(axis=1) ** 2
            v = _safe_div(maxabs, den, den > 0)
        elif name == "hjorth_mobility":
            v = mobility()
        elif name == "hjorth_complexity":
            mob_d = np.sqrt(_safe_div(var_d2, var_d1, var_d1 > 0))
            v = _safe_div(mob_d, mobility(), mobility() > 0)
        elif name == "hist_entropy":
            v = _hist_entropy(x, mn, mx)
        elif name in _ACF_LAGS:
            k = _ACF_LAGS[name]
            if k >= n:
                v = np.zeros(rows)
            else:
                v = _safe_div((xc[:, :-k] * xc[:, k:]).sum(axis=1), n * m2, ok)
        elif name == "mean_crossing_rate":
            v = (xc[:, :-1] * xc[:, 1:] < 0).sum(axis=1) / (n - 1)
        elif name == "diff_mean_abs":
            v = np.abs(d1).mean(axis=1)
        elif name == "diff_std":
            v = np.sqrt(var_d1)
        elif name == "diff_max_abs":
            v = np.abs(d1).max(axis=1)
        elif name == "diff2_mean_abs":
            v = np.abs(d2).mean(axis=1)
        elif name == "mean_abs_dev":
            v = np.abs(xc).mean(axis=1)
        elif name == "frac_above_mean":
            v = (xc > 0).sum(axis=1) / n
        elif name == "longest_strike_above_mean":
            v = _longest_run(xc > 0) / n
        elif name in ("trend_slope", "trend_r2"):
            tc = np.arange(n) - (n - 1) / 2.0
            stt = (tc**2).sum()
            slope = (xc * tc).sum(axis=1) / stt
            v = slope if name == "trend_slope" else _safe_div(slope**2 * stt, n * m2, ok)
        elif name == "peak_rate":
            v = ((x[:, 1:-1] > x[:, :-2]) & (x[:, 1:-1] > x[:, 2:])).sum(axis=1) / n
        elif name == "argmax_frac":
            v = np.argmax(x, axis=1) / n
        elif name == "energy_ratio_halves":
            v = _safe_div((x[:, n // 2 :] ** 2).sum(axis=1), energy, energy > 0)
        else:
            raise KeyError(f"unknown statistic {name!r}")
        out[:, j] = v
    return out


def _unit_rows(a: np.ndarray) -> np.ndarray:
    m = np.abs(a).max(axis=1, keepdims=True)
    return a / np.where(m > 0, m, 1.0)


def _corr(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = _unit_rows(a), _unit_rows(b)
    ac = a - a.mean(axis=1, keepdims=True)
    bc = b - b.mean(axis=1, keepdims=True)
    sa = np.sqrt((ac**2).sum(axis=1))
    sb = np.sqrt((bc**2).sum(axis=1))
    ok = (sa > 1e-10 * np.abs(a).max(axis=1) * np.sqrt(a.shape[1])) & (sb > 1e-10 * np.abs(b).max(axis=1) * np.sqrt(b.shape[1]))
    return _safe_div((ac * bc).sum(axis=1), sa * sb, ok)


def _as_signals(trials) -> np.ndarray:
    if isinstance(trials, TactileTrial):
        return trials.channels[None]
    if isinstance(trials, TactileDataset):
        return trials.signals()
    arr = np.asarray(trials, dtype=float)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1] != 4:
        raise ValueError(f"expected (n_trials, 4, length) signals, got {arr.shape}")
    return arr


def extract_time_features(trials) -> np.ndarray:
    """Raw 194-D time-domain block. One trial -> 1-D, several -> 2-D."""
    sig = _as_signals(trials)
    m, _, n = sig.shape
    per_channel = row_stats(sig.reshape(m * 4, n), TIME_STATS).reshape(m, 4 * len(TIME_STATS))
    cross = np.stack([_corr(sig[:, 0], sig[:, 1]), _corr(sig[:, 2], sig[:, 3])], axis=1)
    out = np.concatenate([per_channel, cross], axis=1)
    return out[0] if isinstance(trials, TactileTrial) else out


def subband_features(coeffs: list[np.ndarray]) -> np.ndarray:
    """24 statistics for each of the four sub-bands of every row; ``(rows, 96)``."""
    energies = np.stack([(c**2).sum(axis=1) for c in coeffs], axis=1)
    # shares from a common rescaling, so they survive when the energies underflow
    peak = np.max([np.abs(c).max(axis=1) for c in coeffs], axis=0)
    peak = np.where(peak > 0, peak, 1.0)[:, None]
    unit = np.stack([((c / peak) ** 2).sum(axis=1) for c in coeffs], axis=1)
    total = unit.sum(axis=1, keepdims=True)
    rel = _safe_div(unit, total, total > 0)
    blocks = []
    for b, c in enumerate(coeffs):
        stats = row_stats(c, SUBBAND_STATS)
        blocks.append(np.column_stack([stats, rel[:, b], np.log1p(energies[:, b])]))
    return np.concatenate(blocks, axis=1)


def extract_freq_features(trials, wavelet: str = "db4") -> np.ndarray:
    """Raw 192-D DWT block computed on the two PVDF channels."""
    sig = _as_signals(trials)
    m = sig.shape[0]
    pvdf = sig[:, :2].reshape(m * 2, -1)
    coeffs = list(dwt3(pvdf, wavelet))
    out = subband_features(coeffs).reshape(m, 2 * len(SUBBANDS) * len(FREQ_STATS))
    return out[0] if isinstance(trials, TactileTrial) else out


def extract_features(trials, wavelet: str = "db4", chunk: int = 256) -> np.ndarray:
    """Raw 386-D feature vector(s) in catalog order."""
    sig = _as_signals(trials)
    parts = []
    for start in range(0, sig.shape[0], chunk):
        block = sig[start : start + chunk]
        parts.append(np.concatenate([extract_time_features(block), extract_freq_features(block, wavelet)], axis=1))
    out = np.concatenate(parts, axis=0) if parts else np.zeros((0, N_FEATURES))
    return out[0] if isinstance(trials, TactileTrial) else out


# ---------------------------------------------------------------------------
# standardization


@dataclass(frozen=True, eq=False)
class Standardizer:
    means: np.ndarray
    stds: np.ndarray
    constant_mask: np.ndarray
    catalog_version: str = DEFAULT_CATALOG.version

    def apply(self, raw: np.ndarray, catalog_version: str | None = None) -> np.ndarray:
        return apply_standardizer(raw, self, catalog_version)

    def to_json(self) -> dict:
        return {
            "means": self.means.tolist(),
            "stds": self.stds.tolist(),
            "constant_mask": self.constant_mask.astype(int).tolist(),
            "catalog_version": self.catalog_version,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Standardizer":
        return cls(np.array(d["means"], float), np.array(d["stds"], float), np.array(d["constant_mask"], bool), d["catalog_version"])


def fit_standardizer(train_features: np.ndarray, catalog_version: str = DEFAULT_CATALOG.version) -> Standardizer:
    """Per-feature z-score fitted on training rows only."""
    X = np.asarray(train_features, dtype=float)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("need a 2-D training matrix with at least one row")
    if not np.all(np.isfinite(X)):
        raise ValueError("training features contain non-finite values")
    means = X.mean(axis=0)
    stds = X.std(axis=0)
    constant = stds <= 1e-12 * np.maximum(1.0, np.abs(means))
    stds = np.where(constant, 1.0, stds)
    return Standardizer(means, stds, constant, catalog_version)


def apply_standardizer(raw: np.ndarray, standardizer: Standardizer, catalog_version: str | None = None) -> np.ndarray:
    if catalog_version is not None and catalog_version != standardizer.catalog_version:
        raise VersionError(f"standardizer fitted on catalog {standardizer.catalog_version}, features from {catalog_version}")
    raw = np.asarray(raw, dtype=float)
    if raw.shape[-1] != standardizer.means.size:
        raise VersionError(f"feature length {raw.shape[-1]} does not match standardizer ({standardizer.means.size})")
    z = (raw - standardizer.means) / standardizer.stds
    return np.where(standardizer.constant_mask, 0.0, z)
