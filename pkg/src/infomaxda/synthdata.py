"""Synthetic source/target domains, CSV ingestion and minibatching.

Every generator is a pure function of its parameters and seed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .numerics import Rng, as_tensor


@dataclass
class LabeledSet:
    x: np.ndarray
    y: np.ndarray
    class_count: int

    def __post_init__(self):
        self.x = as_tensor(self.x, "x")
        self.y = np.asarray(self.y, dtype=np.int64).ravel()
        if self.x.shape[0] < 1 or self.y.shape[0] != self.x.shape[0]:
            raise ValueError("need at least one row and one label per row")
        if self.y.min() < 0 or self.y.max() >= self.class_count:
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def unlabeled(self) -> "UnlabeledSet":
        return UnlabeledSet(self.x.copy())


@dataclass
class UnlabeledSet:
    x: np.ndarray

    def __post_init__(self):
        self.x = as_tensor(self.x, "x")
        if self.x.shape[0] < 1:
            raise ValueError("need at least one row")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]


@dataclass
class DomainSpec:
    """Declarative description of a synthetic domain.

    ``kind`` is one of ``two_moons`` (params: n, noise, rotation_deg, seed),
    ``blob_shift`` (n, dims, classes, shift, seed) or ``correlated_gaussian``
    (n, dims, rho, seed).
    """

    kind: str
    params: dict = field(default_factory=dict)

    _REQUIRED = {
        "two_moons": ("n", "noise", "seed"),
        "blob_shift": ("n", "dims", "classes", "shift", "seed"),
        "correlated_gaussian": ("n", "dims", "rho", "seed"),
    }

    def __post_init__(self):
        if self.kind not in self._REQUIRED:
            raise ValueError(f"unknown domain kind {self.kind!r}")
        missing = [k for k in self._REQUIRED[self.kind] if k not in self.params]
        if missing:
            raise ValueError(f"{self.kind} needs params {missing}")
        p = self.params
        if p["n"] < 2:
            raise ValueError("n must be >= 2")
        if self.kind == "two_moons" and p["noise"] < 0:
            raise ValueError("noise must be >= 0")
        if self.kind == "correlated_gaussian" and not abs(p["rho"]) < 1:
            raise ValueError("|rho| must be < 1")

    def build(self):
        p = self.params
        if self.kind == "two_moons":
            data = gen_two_moons(p["n"], p["noise"], p["seed"])
            return rotate(data, p.get("rotation_deg", 0.0))
        if self.kind == "blob_shift":
            return gen_blob_shift(p["n"], p["dims"], p["classes"], p["shift"], p["seed"])
        return gen_correlated_gaussians(p["n"], p["dims"], p["rho"], p["seed"])


def gen_two_moons(n: int, noise: float = 0.1, seed: int = 0) -> LabeledSet:
    """Two interleaved half circles (class 0 upper, class 1 lower) plus Gaussian noise.

    Class 0 gets ``ceil(n/2)`` points on ``(cos t, sin t)``, class 1 gets
    ``floor(n/2)`` on ``(1 - cos t, 0.5 - sin t)``, with ``t`` uniform on
    ``[0, pi]``.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    if noise < 0:
        raise ValueError("noise must be >= 0")
    rng = Rng(seed)
    n0 = (n + 1) // 2
    n1 = n - n0
    t = math.pi * rng.uniform(n)
    x = np.empty((n, 2))
    x[:n0, 0] = np.cos(t[:n0])
    x[:n0, 1] = np.sin(t[:n0])
    x[n0:, 0] = 1.0 - np.cos(t[n0:])
    x[n0:, 1] = 0.5 - np.sin(t[n0:])
    if noise > 0:
        x += noise * rng.normal(2 * n).reshape(n, 2)
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    return LabeledSet(x, y, 2)


def rotate(data, angle_degrees: float):
    """Rotate 2-D points counter-clockwise about the origin."""
    if data.dim != 2:
        raise ValueError("rotation needs 2-D features")
    th = math.radians(angle_degrees)
    c, s = math.cos(th), math.sin(th)
    rot = np.array([[c, s], [-s, c]])  # row vectors: x @ rot
    x = data.x @ rot
    if isinstance(data, LabeledSet):
        return LabeledSet(x, data.y.copy(), data.class_count)
    return UnlabeledSet(x)


def gen_blob_shift(n: int, d: int, C: int, shift, seed: int = 0):
    """Unit-variance Gaussian blobs for the source, the same blobs translated by ``shift`` for the target.

    Returns ``(source, target)``, both labeled. Hand the trainer
    ``target.unlabeled()``; the labels are for scoring only.
    """
    if C < 2 or d < 1:
        raise ValueError("need C >= 2 and d >= 1")
    shift = np.asarray(shift, dtype=np.float64).ravel()
    if shift.size != d:
        raise ValueError("shift length must equal d")
    rng = Rng(seed)
    centers = 4.0 * (2.0 * rng.uniform(C * d).reshape(C, d) - 1.0)
    ys = np.arange(n) % C
    yt = np.arange(n) % C
    xs = centers[ys] + rng.normal(n * d).reshape(n, d)
    xt = centers[yt] + shift + rng.normal(n * d).reshape(n, d)
    return LabeledSet(xs, ys, C), LabeledSet(xt, yt, C)


def gen_correlated_gaussians(n: int, dims: int, rho: float, seed: int = 0):
    """``(x, z)`` with each coordinate pair standard bivariate normal at correlation ``rho``."""
    if not abs(rho) < 1:
        raise ValueError("|rho| must be < 1")
    if n < 1 or dims < 1:
        raise ValueError("need n >= 1 and dims >= 1")
    rng = Rng(seed)
    x = rng.normal(n * dims).reshape(n, dims)
    e = rng.normal(n * dims).reshape(n, dims)
    z = rho * x + math.sqrt(1.0 - rho * rho) * e
    return x, z


def load_csv(path):
    """Read ``f0,...,f{d-1}[,label]`` into a LabeledSet (label column present) or UnlabeledSet."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        has_label = bool(header) and header[-1] == "label"
        n_feat = len(header) - int(has_label)
        expected = [f"f{i}" for i in range(n_feat)]
        if n_feat < 1 or header[:n_feat] != expected:
            raise ValueError(f"{path}: header must be f0,...,f{{d-1}}[,label], got {','.join(header)}")
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}: line {lineno}: expected {len(header)} columns, got {len(row)}")
            try:
                values = [float(c) for c in row[:n_feat]]
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: malformed numeric value") from None
            if not all(math.isfinite(v) for v in values):
                raise ValueError(f"{path}: line {lineno}: non-finite value")
            rows.append(values)
            if has_label:
                lab = row[-1].strip()
                try:
                    labels.append(int(lab))
                except ValueError:
                    raise ValueError(f"{path}: line {lineno}: non-integer label {lab!r}") from None
    if not rows:
        raise ValueError(f"{path}: no data rows")
    x = np.array(rows)
    if has_label:
        y = np.array(labels)
        if y.min() < 0:
            raise ValueError(f"{path}: negative label")
        return LabeledSet(x, y, int(y.max()) + 1)
    return UnlabeledSet(x)


def save_csv(data, path) -> None:
    path = Path(path)
    d = data.dim
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        header = [f"f{i}" for i in range(d)]
        labeled = isinstance(data, LabeledSet)
        w.writerow(header + (["label"] if labeled else []))
        for i in range(len(data)):
            row = [repr(float(v)) for v in data.x[i]]
            w.writerow(row + ([int(data.y[i])] if labeled else []))


def batch_indices(n: int, batch_size: int, rng: Rng) -> list[np.ndarray]:
    """One epoch of index batches: shuffle, slice, drop a tail shorter than 2 rows."""
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    perm = rng.permutation(n)
    out = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if out and len(out[-1]) < 2:
        out.pop()
    return out


def batch_iterator(data, batch_size: int, rng: Rng) -> Iterator:
    """Yield minibatches of ``data`` (same type as ``data``) for one shuffled epoch."""
    for idx in batch_indices(len(data), batch_size, rng):
        if isinstance(data, LabeledSet):
            yield LabeledSet(data.x[idx], data.y[idx], data.class_count)
        else:
            yield UnlabeledSet(data.x[idx])
