"""Turn a packet stream into fixed-size, labeled flow samples.

A sample is every packet of one bidirectional flow that falls inside one
time window, one feature row per packet, capped at ``n`` rows.  Windows are
tracked per flow: a flow's window restarts at the first packet that arrives
``t`` seconds or more after the current window opened.
"""

import csv
import json
import logging
import os
import socket
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np

from .errors import (
    CorruptManifest,
    DataError,
    NoRealRows,
    ShapeMismatch,
    SingleClassDataset,
    TooFewSamples,
    TooManyRows,
    UnlabeledFlow,
    VersionMismatch,
)
from .pcap import FEATURE_NAMES, N_FEATURES, extract_features

log = logging.getLogger(__name__)

DATASET_VERSION = 1
DEFAULT_T = 10.0
DEFAULT_N = 100

LABEL_BENIGN = 0
LABEL_DDOS = 1
_UNLABELED_BYTE = 255

LABEL_COLUMNS = ("match_type", "ip_a", "port_a", "ip_b", "port_b", "proto", "label")
MATCH_TYPES = ("exact", "src_ip", "dst_ip", "ip")


class FlowKey(NamedTuple):
    ip_lo: str
    port_lo: int
    ip_hi: str
    port_hi: int
    proto: int

    def __str__(self):
        return f"{self.ip_lo}:{self.port_lo}<->{self.ip_hi}:{self.port_hi}/{self.proto}"


def _endpoint_order(ip, port):
    return socket.inet_aton(ip), port


def flow_key_order(key):
    """Numeric sort key (addresses compared as integers, not strings)."""
    return (*_endpoint_order(key.ip_lo, key.port_lo), *_endpoint_order(key.ip_hi, key.port_hi),
            key.proto)


def make_flow_key(ip_a, port_a, ip_b, port_b, proto):
    if _endpoint_order(ip_a, port_a) <= _endpoint_order(ip_b, port_b):
        return FlowKey(ip_a, port_a, ip_b, port_b, proto)
    return FlowKey(ip_b, port_b, ip_a, port_a, proto)


def canonical_flow_key(p):
    return make_flow_key(p.src_ip, p.src_port, p.dst_ip, p.dst_port, p.ip_proto)


@dataclass(frozen=True)
class AssemblerConfig:
    t: float = DEFAULT_T
    n: int = DEFAULT_N

    def __post_init__(self):
        if not self.t > 0:
            raise ValueError(f"window length t must be > 0, got {self.t}")
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"rows per sample n must be an integer >= 1, got {self.n}")


@dataclass(frozen=True, eq=False)
class FlowSample:
    key: FlowKey
    window_start: float
    rows: np.ndarray
    row_count: int
    label: Optional[int] = None
    initiator: Optional[str] = None  # source address of the flow's first packet

    @property
    def identity(self):
        return self.window_start, self.key


@dataclass(frozen=True, eq=False)
class NormStats:
    min: np.ndarray
    max: np.ndarray

    def fingerprint(self):
        import hashlib

        h = hashlib.sha256()
        h.update(np.asarray(self.min, dtype="<f8").tobytes())
        h.update(np.asarray(self.max, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


class Split(NamedTuple):
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


@dataclass(eq=False)
class Dataset:
    samples: list
    stats: NormStats
    split: Split
    class_weights: tuple
    t: float = DEFAULT_T
    n: int = DEFAULT_N
    _x: Optional[np.ndarray] = field(default=None, repr=False)

    def __len__(self):
        return len(self.samples)

    @property
    def x(self):
        """All sample matrices stacked as float32 [N, n, 11]."""
        if self._x is None:
            if self.samples:
                self._x = np.stack([s.rows for s in self.samples]).astype(np.float32, copy=False)
            else:
                self._x = np.zeros((0, self.n, N_FEATURES), dtype=np.float32)
        return self._x

    @property
    def y(self):
        return np.array([_UNLABELED_BYTE if s.label is None else s.label for s in self.samples],
                        dtype=np.uint8)

    def indices(self, which):
        return getattr(self.split, which)

    def arrays(self, which):
        idx = self.indices(which)
        return self.x[idx], self.y[idx]


def assemble_samples(packets, cfg):
    """Group packets into raw (unnormalized, unpadded, unlabeled) samples.

    Rows hold feature values relative to their own window start.  Packets
    beyond ``cfg.n`` in one window are dropped.
    """
    window_of = {}
    initiator = {}
    buckets = {}
    for p in packets:
        key = canonical_flow_key(p)
        start = window_of.get(key)
        if start is None:
            initiator[key] = p.src_ip
            start = window_of[key] = p.ts
        elif p.ts >= start + cfg.t:
            start = window_of[key] = p.ts
        rows = buckets.get((start, key))
        if rows is None:
            rows = buckets[(start, key)] = []
        if len(rows) < cfg.n:
            rows.append(extract_features(p, start))

    ordered = sorted(buckets.items(), key=lambda kv: (kv[0][0], flow_key_order(kv[0][1])))
    return [
        FlowSample(key, start, np.array(rows, dtype=np.float64).reshape(-1, N_FEATURES),
                   len(rows), initiator=initiator[key])
        for (start, key), rows in ordered
    ]


def fit_norm_stats(samples):
    real = [s.rows[: s.row_count] for s in samples if s.row_count > 0]
    if not real:
        raise NoRealRows("cannot fit normalization stats without any packet rows")
    stacked = np.concatenate(real, axis=0)
    return NormStats(stacked.min(axis=0), stacked.max(axis=0))


def normalize_sample(s, stats):
    rows = np.array(s.rows, dtype=np.float64)
    real = rows[: s.row_count]
    span = stats.max - stats.min
    live = span > 0
    scaled = np.zeros_like(real)
    scaled[:, live] = (real[:, live] - stats.min[live]) / span[live]
    rows[: s.row_count] = np.clip(scaled, 0.0, 1.0)
    return replace(s, rows=rows)


def pad_sample(s, n):
    if s.row_count > n:
        raise TooManyRows(f"sample {s.key} has {s.row_count} rows, limit is {n}")
    rows = np.zeros((n, N_FEATURES), dtype=s.rows.dtype)
    rows[: s.row_count] = s.rows[: s.row_count]
    return replace(s, rows=rows)


@dataclass(frozen=True)
class LabelRule:
    match_type: str
    ip_a: str
    port_a: Optional[int] = None
    ip_b: Optional[str] = None
    port_b: Optional[int] = None
    proto: Optional[int] = None
    label: int = LABEL_BENIGN

    def __post_init__(self):
        if self.match_type not in MATCH_TYPES:
            raise DataError(f"unknown label match_type {self.match_type!r}")
        if self.label not in (LABEL_BENIGN, LABEL_DDOS):
            raise DataError(f"label must be 0 or 1, got {self.label!r}")
        if self.match_type == "exact" and None in (self.port_a, self.ip_b, self.port_b, self.proto):
            raise DataError("exact label rules need both endpoints and the protocol")

    @classmethod
    def exact(cls, key, label):
        return cls("exact", key.ip_lo, key.port_lo, key.ip_hi, key.port_hi, key.proto, label)


def _opt_int(value):
    value = (value or "").strip()
    return int(value) if value else None


def load_label_map(path):
    rules = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = set(LABEL_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{path}: label file lacks columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                rules.append(LabelRule(
                    row["match_type"].strip(),
                    row["ip_a"].strip(),
                    _opt_int(row["port_a"]),
                    row["ip_b"].strip() or None,
                    _opt_int(row["port_b"]),
                    _opt_int(row["proto"]),
                    int(row["label"]),
                ))
            except (ValueError, AttributeError) as exc:
                raise DataError(f"{path}:{lineno}: bad label row ({exc})") from exc
    return rules


def write_label_map(rules, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LABEL_COLUMNS)
        for r in rules:
            w.writerow(["" if v is None else v for v in
                        (r.match_type, r.ip_a, r.port_a, r.ip_b, r.port_b, r.proto, r.label)])


class _RuleIndex:
    # Precedence: exact 5-tuple, then directional address rules, then bare
    # address rules.  Within one tier the first rule listed wins.
    def __init__(self, rules):
        self.exact = {}
        self.src = {}
        self.dst = {}
        self.any = {}
        tiers = {"src_ip": self.src, "dst_ip": self.dst, "ip": self.any}
        for r in rules:
            if r.match_type == "exact":
                key = make_flow_key(r.ip_a, r.port_a, r.ip_b, r.port_b, r.proto)
                self.exact.setdefault(key, r.label)
            else:
                tiers[r.match_type].setdefault(r.ip_a, []).append(r)

    @staticmethod
    def _first(candidates, proto):
        for r in candidates:
            if r.proto is None or r.proto == proto:
                return r.label
        return None

    def lookup(self, key, initiator):
        label = self.exact.get(key)
        if label is not None:
            return label
        if initiator is not None:
            responder = key.ip_hi if initiator == key.ip_lo else key.ip_lo
            label = self._first(self.src.get(initiator, ()), key.proto)
            if label is None:
                label = self._first(self.dst.get(responder, ()), key.proto)
            if label is not None:
                return label
        for ip in (key.ip_lo, key.ip_hi):
            label = self._first(self.any.get(ip, ()), key.proto)
            if label is not None:
                return label
        return None


def label_samples(samples, rules):
    index = _RuleIndex(rules)
    out, missing = [], {}
    for s in samples:
        label = index.lookup(s.key, s.initiator)
        if label is None:
            missing[s.key] = None
        else:
            out.append(replace(s, label=label))
    if missing:
        raise UnlabeledFlow(missing)
    return out


def class_weights(labels):
    """Loss weights ``N / (2 * N_c)`` per class, returned as (w_benign, w_ddos)."""
    labels = np.asarray(labels)
    total = labels.size
    counts = [int(np.count_nonzero(labels == c)) for c in (LABEL_BENIGN, LABEL_DDOS)]
    if min(counts) == 0:
        raise SingleClassDataset(f"need both classes, got counts {counts}")
    return tuple(total / (2 * c) for c in counts)


def split_dataset(n_samples, ratios=(80, 10, 10), seed=0):
    """Shuffle indices by seed; train and val sizes are floored, test takes the rest."""
    if not isinstance(n_samples, (int, np.integer)):
        n_samples = len(n_samples)
    if n_samples < 10:
        raise TooFewSamples(f"need at least 10 samples to split, got {n_samples}")
    total = sum(ratios)
    n_train = n_samples * ratios[0] // total
    n_val = n_samples * ratios[1] // total
    perm = np.random.default_rng(seed).permutation(n_samples)
    return Split(
        np.sort(perm[:n_train]),
        np.sort(perm[n_train:n_train + n_val]),
        np.sort(perm[n_train + n_val:]),
    )


def prepare_samples(raw, stats, n):
    """Normalize then zero-pad, leaving float32 matrices ready for the model."""
    out = []
    for s in raw:
        s = pad_sample(normalize_sample(s, stats), n)
        out.append(replace(s, rows=s.rows.astype(np.float32)))
    return out


def build_dataset(packets, rules, cfg, seed=0, ratios=(80, 10, 10)):
    raw = assemble_samples(packets, cfg)
    split = split_dataset(len(raw), ratios, seed)
    stats = fit_norm_stats([raw[i] for i in split.train])
    samples = label_samples(prepare_samples(raw, stats, cfg.n), rules)
    weights = class_weights([samples[i].label for i in split.train])
    log.info("assembled %d samples (train/val/test %d/%d/%d)", len(samples),
             len(split.train), len(split.val), len(split.test))
    return Dataset(samples, stats, split, weights, cfg.t, cfg.n)


# -- on-disk format -----------------------------------------------------------

_INDEX_COLUMNS = ("window_start", "ip_lo", "port_lo", "ip_hi", "port_hi", "proto", "row_count",
                  "initiator")


def write_dataset(d, directory):
    os.makedirs(directory, exist_ok=True)
    meta = {
        "version": DATASET_VERSION,
        "t": d.t,
        "n": d.n,
        "feature_count": N_FEATURES,
        "feature_names": list(FEATURE_NAMES),
        "norm_min": [float(v) for v in d.stats.min],
        "norm_max": [float(v) for v in d.stats.max],
        "class_weights": [float(w) for w in d.class_weights],
        "split": {name: [int(i) for i in getattr(d.split, name)] for name in Split._fields},
        "sample_count": len(d),
    }
    with open(os.path.join(directory, "meta.json"), "w") as f:
        json.dump(meta, f, indent=1)
    d.x.astype("<f4").tofile(os.path.join(directory, "samples.f32le"))
    d.y.tofile(os.path.join(directory, "labels.u8"))
    with open(os.path.join(directory, "index.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(_INDEX_COLUMNS)
        for s in d.samples:
            w.writerow([repr(s.window_start), *s.key[:5], s.row_count, s.initiator or ""])


def _read_meta(directory):
    try:
        with open(os.path.join(directory, "meta.json")) as f:
            meta = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptManifest(f"{directory}: unreadable meta.json ({exc})") from exc
    if not isinstance(meta, dict):
        raise CorruptManifest(f"{directory}: meta.json is not an object")
    if meta.get("version") != DATASET_VERSION:
        raise VersionMismatch(f"{directory}: dataset version {meta.get('version')!r}, "
                              f"expected {DATASET_VERSION}")
    required = ("t", "n", "feature_count", "norm_min", "norm_max", "class_weights", "split",
                "sample_count")
    missing = [k for k in required if k not in meta]
    if missing:
        raise CorruptManifest(f"{directory}: meta.json lacks {missing}")
    return meta


def read_dataset(directory):
    meta = _read_meta(directory)
    count, n, nf = int(meta["sample_count"]), int(meta["n"]), int(meta["feature_count"])
    x_path = os.path.join(directory, "samples.f32le")
    expected = count * n * nf * 4
    actual = os.path.getsize(x_path)
    if actual != expected:
        raise ShapeMismatch(f"{x_path}: {actual} bytes, manifest implies {expected} "
                            f"({count} x {n} x {nf} float32)")
    if nf != N_FEATURES:
        raise ShapeMismatch(f"feature_count {nf}, this build uses {N_FEATURES}")
    y_path = os.path.join(directory, "labels.u8")
    if os.path.getsize(y_path) != count:
        raise ShapeMismatch(f"{y_path}: expected {count} bytes")
    x = np.fromfile(x_path, dtype="<f4").astype(np.float32).reshape(count, n, nf)
    y = np.fromfile(y_path, dtype=np.uint8)

    with open(os.path.join(directory, "index.csv"), newline="") as f:
        index = list(csv.DictReader(f))
    if len(index) != count:
        raise ShapeMismatch(f"index.csv has {len(index)} rows, manifest says {count}")
    samples = []
    for i, row in enumerate(index):
        key = FlowKey(row["ip_lo"], int(row["port_lo"]), row["ip_hi"], int(row["port_hi"]),
                      int(row["proto"]))
        label = None if y[i] == _UNLABELED_BYTE else int(y[i])
        samples.append(FlowSample(key, float(row["window_start"]), x[i], int(row["row_count"]),
                                  label, row["initiator"] or None))
    try:
        split = Split(*(np.array(meta["split"][k], dtype=np.int64) for k in Split._fields))
    except (KeyError, TypeError) as exc:
        raise CorruptManifest(f"{directory}: bad split section ({exc})") from exc
    stats = NormStats(np.array(meta["norm_min"], dtype=np.float64),
                      np.array(meta["norm_max"], dtype=np.float64))
    return Dataset(samples, stats, split, tuple(meta["class_weights"]), float(meta["t"]), n, x)
