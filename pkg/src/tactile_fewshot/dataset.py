"""Trial and dataset containers, file ingestion and train/test split protocols.

Binary layout (``.tact``), all little-endian::

    magic        4 bytes   b"TACT"
    version      u16       currently 1
    n_channels   u16       always 4
    n_trials     u32
    sample_rate  f64       Hz
    trial table  n_trials records of
                   trial_id u32, shape_id u16, material u8, pad u8,
                   force_n f64, speed_mm_s f64, n_samples u32
    channel data for each trial in table order: 4 * n_samples f64,
                 channel-major (all of ch1, then ch2, ...)
"""
from __future__ import annotations

import csv
import enum
import io
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

N_SHAPES = 12
N_CHANNELS = 4
MIN_SAMPLES = 64
PVDF_CHANNELS = (0, 1)
SG_CHANNELS = (2, 3)
CSV_COLUMNS = ("trial_id", "shape_id", "material", "force_n", "speed_mm_s", "t_index", "ch1", "ch2", "ch3", "ch4")
MAGIC = b"TACT"
FORMAT_VERSION = 1

_HEADER = np.dtype([("magic", "S4"), ("version", "<u2"), ("n_channels", "<u2"), ("n_trials", "<u4"), ("sample_rate", "<f8")])
_TRIAL_RECORD = np.dtype(
    [
        ("trial_id", "<u4"),
        ("shape_id", "<u2"),
        ("material", "u1"),
        ("pad", "u1"),
        ("force_n", "<f8"),
        ("speed_mm_s", "<f8"),
        ("n_samples", "<u4"),
    ]
)


class DatasetError(ValueError):
    """Base class for dataset problems."""


class SchemaError(DatasetError):
    pass


class IntegrityError(DatasetError):
    pass


class LabelError(DatasetError):
    pass


class ProtocolError(DatasetError):
    pass


class Material(enum.IntEnum):
    RESIN = 0
    WOOD = 1
    ALUMINUM = 2

    @property
    def label(self) -> str:
        return self.name.capitalize()

    @classmethod
    def parse(cls, value: "str | int | Material") -> "Material":
        if isinstance(value, Material):
            return value
        if isinstance(value, (int, np.integer)):
            try:
                return cls(int(value))
            except ValueError:
                raise LabelError(f"unknown material id {value!r}") from None
        try:
            return cls[str(value).strip().upper()]
        except KeyError:
            raise LabelError(f"unknown material {value!r}; expected Resin|Wood|Aluminum") from None


def class_id(shape_id: int, material: "Material | int") -> int:
    """Dense 0..35 index of a (shape, material) class."""
    return int(Material.parse(material)) * N_SHAPES + (int(shape_id) - 1)


def class_key(cid: int) -> tuple[int, Material]:
    return cid % N_SHAPES + 1, Material(cid // N_SHAPES)


@dataclass(frozen=True, eq=False)
class TactileTrial:
    """One sliding pass: four synchronized traces plus labels.

    Channels 1-2 (rows 0-1) are PVDF, channels 3-4 (rows 2-3) are strain gauges.
    """

    channels: np.ndarray
    shape_id: int
    material: Material
    force: float = 1.0
    speed: float = 10.0
    trial_index: int = 0

    def __post_init__(self):
        ch = np.array(self.channels, dtype=float)
        if ch.ndim != 2 or ch.shape[0] != N_CHANNELS:
            raise IntegrityError(f"expected {N_CHANNELS} channel sequences, got shape {ch.shape}")
        if ch.shape[1] < MIN_SAMPLES:
            raise IntegrityError(f"channels need >= {MIN_SAMPLES} samples, got {ch.shape[1]}")
        if not 1 <= int(self.shape_id) <= N_SHAPES:
            raise LabelError(f"shape_id must be 1..{N_SHAPES}, got {self.shape_id}")
        if int(self.trial_index) < 0:
            raise LabelError("trial_index must be >= 0")
        ch.flags.writeable = False
        object.__setattr__(self, "channels", ch)
        object.__setattr__(self, "shape_id", int(self.shape_id))
        object.__setattr__(self, "material", Material.parse(self.material))
        object.__setattr__(self, "force", float(self.force))
        object.__setattr__(self, "speed", float(self.speed))
        object.__setattr__(self, "trial_index", int(self.trial_index))

    @property
    def window_len(self) -> int:
        return self.channels.shape[1]

    @property
    def class_id(self) -> int:
        return class_id(self.shape_id, self.material)


@dataclass(frozen=True, eq=False)
class TactileDataset:
    trials: tuple[TactileTrial, ...]
    sample_rate_hz: float = 1000.0
    class_index: dict = field(init=False, repr=False)

    def __post_init__(self):
        trials = tuple(self.trials)
        index: dict[tuple[int, Material], list[int]] = {}
        for i, t in enumerate(trials):
            index.setdefault((t.shape_id, t.material), []).append(i)
        object.__setattr__(self, "trials", trials)
        object.__setattr__(self, "class_index", {k: tuple(v) for k, v in sorted(index.items())})

    def __len__(self) -> int:
        return len(self.trials)

    @property
    def n_classes(self) -> int:
        return len(self.class_index)

    def labels(self) -> np.ndarray:
        """Dense class id per trial."""
        return np.array([t.class_id for t in self.trials], dtype=int)

    def shape_ids(self) -> np.ndarray:
        return np.array([t.shape_id for t in self.trials], dtype=int)

    def materials(self) -> np.ndarray:
        return np.array([int(t.material) for t in self.trials], dtype=int)

    def signals(self) -> np.ndarray:
        """``(n_trials, 4, window_len)`` array; requires a common window length."""
        lengths = {t.window_len for t in self.trials}
        if len(lengths) != 1:
            raise IntegrityError(f"trials have differing window lengths {sorted(lengths)}")
        return np.stack([t.channels for t in self.trials])


# ---------------------------------------------------------------------------
# file I/O


def _detect_format(path: str, fmt: str | None) -> str:
    if fmt:
        fmt = fmt.lower().replace("_", "-")
        if fmt in ("csv",):
            return "csv"
        if fmt in ("binary", "columnar-binary", "tact"):
            return "binary"
        raise ValueError(f"unknown dataset format {fmt!r}")
    return "csv" if str(path).lower().endswith(".csv") else "binary"


def write_dataset(dataset: TactileDataset, path: str | os.PathLike, fmt: str | None = None) -> None:
    path = os.fspath(path)
    if _detect_format(path, fmt) == "csv":
        _write_csv(dataset, path)
    else:
        _write_binary(dataset, path)


def load_dataset(path: str | os.PathLike, fmt: str | None = None, sample_rate_hz: float = 1000.0) -> TactileDataset:
    """Read a dataset file.

    ``sample_rate_hz`` only applies to CSV input; the binary header carries
    its own rate.
    """
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    if _detect_format(path, fmt) == "csv":
        return _read_csv(path, sample_rate_hz)
    return _read_binary(path)


def _write_csv(dataset: TactileDataset, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for tid, t in enumerate(dataset.trials):
            prefix = f"{tid},{t.shape_id},{t.material.label},{t.force!r},{t.speed!r},"
            buf = io.StringIO()
            for k, c in enumerate(t.channels.T.tolist()):
                buf.write(f"{prefix}{k},{c[0]!r},{c[1]!r},{c[2]!r},{c[3]!r}\n")
            fh.write(buf.getvalue())


def _read_csv(path: str, sample_rate_hz: float) -> TactileDataset:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError("empty CSV file") from None
        if tuple(header) != CSV_COLUMNS:
            missing = [c for c in CSV_COLUMNS if c not in header]
            extra = [c for c in header if c not in CSV_COLUMNS]
            raise SchemaError(f"bad CSV header: missing={missing} extra={extra}")
        groups: dict[int, dict] = {}
        order: list[int] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_COLUMNS):
                raise SchemaError(f"line {lineno}: expected {len(CSV_COLUMNS)} fields, got {len(row)}")
            tid = int(row[0])
            g = groups.get(tid)
            if g is None:
                g = groups[tid] = {
                    "shape_id": int(row[1]),
                    "material": Material.parse(row[2]),
                    "force": float(row[3]),
                    "speed": float(row[4]),
                    "cols": [[], [], [], []],
                }
                order.append(tid)
            cols = g["cols"]
            for c in range(N_CHANNELS):
                cell = row[6 + c].strip()
                if cell != "":
                    cols[c].append(float(cell))
    trials = []
    per_class: dict[tuple[int, Material], int] = {}
    for tid in sorted(order):
        g = groups[tid]
        lengths = {len(c) for c in g["cols"]}
        if len(lengths) != 1:
            raise IntegrityError(f"trial {tid}: ragged channel lengths {[len(c) for c in g['cols']]}")
        key = (g["shape_id"], g["material"])
        idx = per_class.get(key, 0)
        per_class[key] = idx + 1
        trials.append(TactileTrial(np.array(g["cols"]), g["shape_id"], g["material"], g["force"], g["speed"], idx))
    return TactileDataset(tuple(trials), sample_rate_hz)


def _write_binary(dataset: TactileDataset, path: str) -> None:
    header = np.zeros(1, dtype=_HEADER)
    header["magic"] = MAGIC
    header["version"] = FORMAT_VERSION
    header["n_channels"] = N_CHANNELS
    header["n_trials"] = len(dataset)
    header["sample_rate"] = dataset.sample_rate_hz
    table = np.zeros(len(dataset), dtype=_TRIAL_RECORD)
    for i, t in enumerate(dataset.trials):
        table[i] = (i, t.shape_id, int(t.material), 0, t.force, t.speed, t.window_len)
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(table.tobytes())
        for t in dataset.trials:
            fh.write(np.ascontiguousarray(t.channels, dtype="<f8").tobytes())


def _read_binary(path: str) -> TactileDataset:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size < _HEADER.itemsize:
        raise SchemaError("file too short for TACT header")
    header = raw[: _HEADER.itemsize].view(_HEADER)[0]
    if bytes(header["magic"]) != MAGIC:
        raise SchemaError("bad magic bytes; not a TACT file")
    if int(header["version"]) != FORMAT_VERSION:
        raise SchemaError(f"unsupported TACT version {int(header['version'])}")
    if int(header["n_channels"]) != N_CHANNELS:
        raise SchemaError(f"expected {N_CHANNELS} channels, header says {int(header['n_channels'])}")
    n = int(header["n_trials"])
    off = _HEADER.itemsize
    end = off + n * _TRIAL_RECORD.itemsize
    if raw.size < end:
        raise IntegrityError("truncated trial table")
    table = raw[off:end].view(_TRIAL_RECORD)
    off = end
    trials = []
    per_class: dict[tuple[int, Material], int] = {}
    for rec in table:
        ns = int(rec["n_samples"])
        nbytes = N_CHANNELS * ns * 8
        if raw.size < off + nbytes:
            raise IntegrityError(f"truncated channel block for trial {int(rec['trial_id'])}")
        block = raw[off : off + nbytes].view("<f8").reshape(N_CHANNELS, ns).astype(float)
        off += nbytes
        material = Material.parse(int(rec["material"]))
        key = (int(rec["shape_id"]), material)
        idx = per_class.get(key, 0)
        per_class[key] = idx + 1
        trials.append(TactileTrial(block, int(rec["shape_id"]), material, float(rec["force_n"]), float(rec["speed_mm_s"]), idx))
    if off != raw.size:
        raise IntegrityError(f"{raw.size - off} trailing bytes after channel data")
    return TactileDataset(tuple(trials), float(header["sample_rate"]))


# ---------------------------------------------------------------------------
# split protocols


@dataclass(frozen=True)
class ClosedSet:
    name = "closed-set"


@dataclass(frozen=True)
class CrossShape:
    fold: int = 0
    name = "cross-shape"

    def __post_init__(self):
        if self.fold not in (0, 1, 2):
            raise ProtocolError(f"CrossShape fold must be 0..2, got {self.fold}")


@dataclass(frozen=True)
class CrossMaterial:
    held_in: Material = Material.RESIN
    name = "cross-material"

    def __post_init__(self):
        object.__setattr__(self, "held_in", Material.parse(self.held_in))


DEFAULT_PERTURBATION_GRID = tuple((f, s) for f in (0.75, 1.0, 1.25) for s in (0.5, 1.0, 1.5) if (f, s) != (1.0, 1.0))


@dataclass(frozen=True)
class ForceSpeed:
    """Train on nominal trials, test on trials whose (force, speed) scale is in ``grid``."""

    grid: tuple = DEFAULT_PERTURBATION_GRID
    nominal_force: float = 1.0
    nominal_speed: float = 10.0
    name = "force-speed"

    def __post_init__(self):
        grid = tuple((float(f), float(s)) for f, s in self.grid)
        if any(f <= 0 or s <= 0 for f, s in grid):
            raise ProtocolError("perturbation scales must be > 0")
        object.__setattr__(self, "grid", grid)


def protocol_label(protocol) -> str:
    if isinstance(protocol, CrossShape):
        return f"cross-shape/fold{protocol.fold}"
    if isinstance(protocol, CrossMaterial):
        return f"cross-material/{protocol.held_in.label}"
    return protocol.name


@dataclass(frozen=True)
class SplitSpec:
    protocol: object
    train_trial_ids: tuple[int, ...]
    test_trial_ids: tuple[int, ...]
    rng_seed: int
    test_shapes: tuple[int, ...] = ()
    test_materials: tuple[int, ...] = ()

    @property
    def label(self) -> str:
        return protocol_label(self.protocol)


def _is_scale(value: float, nominal: float, scale: float) -> bool:
    return abs(value - nominal * scale) <= 1e-9 * max(1.0, abs(nominal * scale))


def _nominal_ids(dataset: TactileDataset, protocol: ForceSpeed) -> set[int]:
    return {
        i
        for i, t in enumerate(dataset.trials)
        if _is_scale(t.force, protocol.nominal_force, 1.0) and _is_scale(t.speed, protocol.nominal_speed, 1.0)
    }


def _require(dataset: TactileDataset, keys: Iterable[tuple[int, Material]], ids: set[int] | None = None, minimum: int = 2) -> None:
    for key in keys:
        members = dataset.class_index.get(key, ())
        if ids is not None:
            members = [i for i in members if i in ids]
        if len(members) < minimum:
            raise ProtocolError(f"class S{key[0]}/{Material.parse(key[1]).label} has {len(members)} usable trials, need >= {minimum}")


def _all_classes() -> list[tuple[int, Material]]:
    return [(s, m) for s in range(1, N_SHAPES + 1) for m in Material]


def _half_split(ids: Sequence[int], rng: np.random.Generator) -> tuple[list[int], list[int]]:
    ids = list(ids)
    perm = rng.permutation(len(ids))
    n_train = (len(ids) + 1) // 2
    return sorted(ids[i] for i in perm[:n_train]), sorted(ids[i] for i in perm[n_train:])


def shape_folds(seed: int) -> list[tuple[int, ...]]:
    """Seeded partition of the 12 shapes into 3 folds of 4 test shapes."""
    perm = np.random.default_rng([int(seed), 0x5AFE]).permutation(N_SHAPES) + 1
    return [tuple(sorted(int(s) for s in perm[4 * f : 4 * f + 4])) for f in range(3)]


def make_split(dataset: TactileDataset, protocol, seed: int = 0) -> SplitSpec:
    """Build a train/test partition for one protocol; deterministic in ``seed``."""
    seed = int(seed)
    if isinstance(protocol, ClosedSet):
        _require(dataset, _all_classes())
        rng = np.random.default_rng([seed, 1])
        train, test = [], []
        for key in _all_classes():
            tr, te = _half_split(dataset.class_index[key], rng)
            train += tr
            test += te
        return SplitSpec(protocol, tuple(sorted(train)), tuple(sorted(test)), seed)

    if isinstance(protocol, CrossShape):
        present = {s for s, _ in dataset.class_index}
        if present != set(range(1, N_SHAPES + 1)):
            raise ProtocolError(f"CrossShape needs all {N_SHAPES} shapes, dataset has {sorted(present)}")
        _require(dataset, dataset.class_index)
        test_shapes = shape_folds(seed)[protocol.fold]
        shapes = dataset.shape_ids()
        test = [i for i in range(len(dataset)) if shapes[i] in test_shapes]
        train = [i for i in range(len(dataset)) if shapes[i] not in test_shapes]
        return SplitSpec(protocol, tuple(train), tuple(test), seed, test_shapes=test_shapes)

    if isinstance(protocol, CrossMaterial):
        present = {m for _, m in dataset.class_index}
        if present != set(Material):
            raise ProtocolError(f"CrossMaterial needs all 3 materials, dataset has {sorted(m.label for m in present)}")
        _require(dataset, dataset.class_index)
        mats = dataset.materials()
        held = int(protocol.held_in)
        train = [i for i in range(len(dataset)) if mats[i] == held]
        test = [i for i in range(len(dataset)) if mats[i] != held]
        test_mats = tuple(int(m) for m in Material if m != held)
        return SplitSpec(protocol, tuple(train), tuple(test), seed, test_materials=test_mats)

    if isinstance(protocol, ForceSpeed):
        nominal = _nominal_ids(dataset, protocol)
        _require(dataset, _all_classes(), nominal)
        perturbed = [
            i
            for i, t in enumerate(dataset.trials)
            if i not in nominal
            and any(
                _is_scale(t.force, protocol.nominal_force, f) and _is_scale(t.speed, protocol.nominal_speed, s)
                for f, s in protocol.grid
            )
        ]
        perturbed_set = set(perturbed)
        _require(dataset, _all_classes(), perturbed_set)
        rng = np.random.default_rng([seed, 1])
        train = []
        for key in _all_classes():
            tr, _ = _half_split([i for i in dataset.class_index[key] if i in nominal], rng)
            train += tr
        return SplitSpec(protocol, tuple(sorted(train)), tuple(perturbed), seed)

    raise ProtocolError(f"unknown protocol {protocol!r}")


def nominal_subset(dataset: TactileDataset, nominal_force: float = 1.0, nominal_speed: float = 10.0) -> TactileDataset:
    """Trials recorded at the nominal force and speed only."""
    keep = _nominal_ids(dataset, ForceSpeed(nominal_force=nominal_force, nominal_speed=nominal_speed))
    return TactileDataset(tuple(t for i, t in enumerate(dataset.trials) if i in keep), dataset.sample_rate_hz)


@dataclass
class ValidationReport:
    checks: list[tuple[str, bool, str]]

    @property
    def passed(self) -> bool:
        return all(ok for _, ok, _ in self.checks)

    def failures(self) -> list[tuple[str, str]]:
        return [(name, msg) for name, ok, msg in self.checks if not ok]


def validate_split(split: SplitSpec, dataset: TactileDataset) -> ValidationReport:
    """Check disjointness, index range and protocol-specific leakage rules."""
    checks: list[tuple[str, bool, str]] = []
    n = len(dataset)
    train, test = set(split.train_trial_ids), set(split.test_trial_ids)
    bad = sorted(i for i in train | test if not 0 <= i < n)
    checks.append(("in_range", not bad, f"out-of-range ids {bad[:5]}" if bad else ""))
    shared = sorted(train & test)
    checks.append(("disjoint", not shared, f"shared trial ids {shared[:5]}" if shared else ""))
    train = {i for i in train if 0 <= i < n}
    test = {i for i in test if 0 <= i < n}
    trials = dataset.trials
    proto = split.protocol

    if isinstance(proto, ClosedSet):
        msgs = []
        for key, members in dataset.class_index.items():
            tr = sum(1 for i in members if i in train)
            te = sum(1 for i in members if i in test)
            if (tr, te) != ((len(members) + 1) // 2, len(members) // 2):
                msgs.append(f"S{key[0]}/{key[1].label}: {tr}/{te}")
        checks.append(("per_class_half", not msgs, "; ".join(msgs[:5])))
    elif isinstance(proto, CrossShape):
        test_shapes = {trials[i].shape_id for i in test}
        leaked = sorted({trials[i].shape_id for i in train} & test_shapes)
        checks.append(("shape_leakage", not leaked, f"test shapes in training: {['S%d' % s for s in leaked]}" if leaked else ""))
        checks.append(("test_shape_count", len(test_shapes) == 4, f"{len(test_shapes)} test shapes"))
    elif isinstance(proto, CrossMaterial):
        test_mats = {trials[i].material for i in test}
        leaked = sorted(m.label for m in {trials[i].material for i in train} & test_mats)
        checks.append(("material_leakage", not leaked, f"test materials in training: {leaked}" if leaked else ""))
        checks.append(("test_material_count", len(test_mats) == 2, f"{len(test_mats)} test materials"))
    elif isinstance(proto, ForceSpeed):
        nominal = _nominal_ids(dataset, proto)
        off = sorted(train - nominal)
        checks.append(("train_nominal", not off, f"non-nominal training trials {off[:5]}" if off else ""))
        nom_test = sorted(test & nominal)
        checks.append(("test_perturbed", not nom_test, f"nominal test trials {nom_test[:5]}" if nom_test else ""))
    return ValidationReport(checks)
