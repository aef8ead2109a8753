"""Small tanh MLP classifier with hand-written backprop, plus synthetic tasks.

Parameters live in one flat float64 vector. Layer ``l`` contributes its
weight matrix (``out x in``, row-major) followed by its bias.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import DimensionError, ParameterError
from .numerics import RngStream, log_softmax, softmax


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if len(self.layer_sizes) < 2:
            raise ParameterError("an MLP needs at least an input and an output layer")
        if any(s < 1 for s in self.layer_sizes):
            raise ParameterError(f"layer sizes must be >= 1, got {self.layer_sizes}")
        if self.activation != "tanh":
            raise ParameterError(f"unsupported activation {self.activation!r}")

    @property
    def num_params(self) -> int:
        return sum(o * i + o for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    def unpack(self, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Split a flat vector into ``(W, b)`` views, one pair per layer."""
        if params.shape != (self.num_params,):
            raise DimensionError(f"expected {self.num_params} parameters, got shape {params.shape}")
        layers = []
        pos = 0
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w = params[pos:pos + fan_out * fan_in].reshape(fan_out, fan_in)
            pos += fan_out * fan_in
            b = params[pos:pos + fan_out]
            pos += fan_out
            layers.append((w, b))
        return layers


@dataclass(frozen=True, eq=False)
class Dataset:
    """Examples as rows of ``inputs`` with integer ``labels``.

    ``ids`` name each row's position in the pool it was drawn from; they are
    what probe/train disjointness is checked against.
    """

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    ids: np.ndarray = None
    vocab: str | None = None

    def __post_init__(self):
        inputs = np.array(self.inputs, dtype=np.float64)
        if inputs.ndim == 1:
            inputs = inputs.reshape(-1, 1)
        labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        if inputs.shape[0] != labels.shape[0]:
            raise DimensionError(f"{inputs.shape[0]} inputs but {labels.shape[0]} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ParameterError(f"labels must lie in [0, {self.num_classes})")
        ids = np.arange(labels.size, dtype=np.int64) if self.ids is None else np.array(self.ids, dtype=np.int64)
        if ids.shape != labels.shape:
            raise DimensionError("ids must have one entry per example")
        for arr in (inputs, labels, ids):
            arr.flags.writeable = False
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return int(self.labels.size)

    @property
    def dim(self) -> int:
        return int(self.inputs.shape[1])

    def subset(self, indices: Sequence[int] | np.ndarray) -> Dataset:
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes, self.ids[idx], self.vocab)


@dataclass(frozen=True, eq=False)
class ProbeSet:
    """Held-out examples the probe loss is measured on."""

    data: Dataset
    train: Dataset | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.data) == 0:
            raise ParameterError("probe set must be nonempty")
        if self.train is not None:
            shared = np.intersect1d(self.data.ids, self.train.ids)
            if shared.size:
                raise ParameterError(f"probe overlaps training data at ids {shared[:5].tolist()}")

    def __len__(self) -> int:
        return len(self.data)


@dataclass
class BatchStream:
    """Minibatches indexed by global step.

    ``batch(t)`` depends only on the stream's seed and ``t``, so a run that
    rolls back still sees the same batch sequence as one that does not.
    """

    dataset: Dataset
    batch_size: int
    rng: RngStream
    step: int = 0

    def batch(self, t: int) -> Dataset:
        n = len(self.dataset)
        gen = self.rng.at(t).generator()
        idx = gen.choice(n, size=self.batch_size, replace=self.batch_size > n)
        return self.dataset.subset(idx)

    def __iter__(self) -> Iterator[Dataset]:
        return self

    def __next__(self) -> Dataset:
        b = self.batch(self.step)
        self.step += 1
        return b


def init_params(spec: MlpSpec, rng: RngStream) -> np.ndarray:
    """Gaussian weights with std ``1/sqrt(fan_in)``, zero biases."""
    gen = rng.generator()
    chunks = []
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        chunks.append(gen.standard_normal(fan_out * fan_in) / math.sqrt(fan_in))
        chunks.append(np.zeros(fan_out))
    return np.concatenate(chunks)


def _forward(params: np.ndarray, x: np.ndarray, spec: MlpSpec):
    layers = spec.unpack(params)
    if x.shape[1] != spec.layer_sizes[0]:
        raise DimensionError(f"input width {x.shape[1]} does not match spec {spec.layer_sizes[0]}")
    acts = [x]
    h = x
    for w, b in layers[:-1]:
        h = np.tanh(h @ w.T + b)
        acts.append(h)
    w, b = layers[-1]
    logits = h @ w.T + b
    return layers, acts, logits


def logits(params: np.ndarray, inputs: np.ndarray, spec: MlpSpec) -> np.ndarray:
    return _forward(params, np.asarray(inputs, dtype=np.float64), spec)[2]


def predict(params: np.ndarray, inputs: np.ndarray, spec: MlpSpec) -> np.ndarray:
    return np.argmax(logits(params, inputs, spec), axis=1)


def accuracy(params: np.ndarray, data: Dataset, spec: MlpSpec) -> float:
    return float(np.mean(predict(params, data.inputs, spec) == data.labels))


def _cross_entropy(logit_rows: np.ndarray, labels: np.ndarray) -> float:
    logp = log_softmax(logit_rows)
    return float(-np.mean(logp[np.arange(labels.size), labels]))


def loss_and_grad(params: np.ndarray, batch: Dataset, spec: MlpSpec) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over ``batch`` and its gradient w.r.t. ``params``."""
    if len(batch) == 0:
        raise ParameterError("batch must be nonempty")
    layers, acts, out = _forward(params, batch.inputs, spec)
    n = len(batch)
    loss = _cross_entropy(out, batch.labels)

    delta = softmax(out)
    delta[np.arange(n), batch.labels] -= 1.0
    delta /= n

    grads = []
    for li in range(len(layers) - 1, -1, -1):
        w, _ = layers[li]
        h_in = acts[li]
        grads.append((delta.T @ h_in, delta.sum(axis=0)))
        if li > 0:
            delta = (delta @ w) * (1.0 - h_in * h_in)
    flat = []
    for gw, gb in reversed(grads):
        flat.append(gw.reshape(-1))
        flat.append(gb)
    return loss, np.concatenate(flat)


def finite_difference_gradient(params: np.ndarray, batch: Dataset, spec: MlpSpec,
                               h: float = 1e-5) -> np.ndarray:
    """Central differences of the batch loss, one coordinate at a time."""
    fd = np.empty(params.size)
    work = np.array(params, dtype=np.float64)
    for i in range(params.size):
        orig = work[i]
        work[i] = orig + h
        plus = loss_and_grad(work, batch, spec)[0]
        work[i] = orig - h
        minus = loss_and_grad(work, batch, spec)[0]
        work[i] = orig
        fd[i] = (plus - minus) / (2.0 * h)
    return fd


def gradient_check(params: np.ndarray, batch: Dataset, spec: MlpSpec, h: float = 1e-5) -> float:
    """Largest per-coordinate relative error ``|g - g_fd| / max(|g|, |g_fd|)``
    between the analytic gradient and central differences. Coordinates where
    both are exactly zero (e.g. weights of an input absent from the batch)
    count as agreeing."""
    _, grad = loss_and_grad(params, batch, spec)
    fd = finite_difference_gradient(params, batch, spec, h)
    diff = np.abs(grad - fd)
    scale = np.maximum(np.abs(grad), np.abs(fd))
    rel = np.divide(diff, scale, out=np.zeros_like(diff), where=scale > 0)
    return float(np.max(rel))


def probe_loss(params: np.ndarray, probe: ProbeSet | Dataset, spec: MlpSpec) -> float:
    """Mean cross-entropy on the probe set; no gradient, no side effects."""
    data = probe.data if isinstance(probe, ProbeSet) else probe
    if len(data) == 0:
        raise ParameterError("probe set must be nonempty")
    _, _, out = _forward(params, data.inputs, spec)
    return _cross_entropy(out, data.labels)


def make_blobs(rng: RngStream | np.random.Generator, n: int, num_classes: int, dim: int,
               separation: float, noise: float = 1.0) -> Dataset:
    """Gaussian clusters, one per class, assigned round-robin.

    Centers sit on a regular polygon in the first two coordinates with
    adjacent centers exactly ``separation`` apart (on a line when ``dim == 1``).
    """
    if num_classes < 2 or n < num_classes:
        raise ParameterError("need n >= num_classes >= 2")
    if dim < 1:
        raise ParameterError("dim must be >= 1")
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    centers = np.zeros((num_classes, dim))
    if dim == 1:
        centers[:, 0] = separation * np.arange(num_classes)
    else:
        radius = separation / (2.0 * math.sin(math.pi / num_classes))
        angles = 2.0 * math.pi * np.arange(num_classes) / num_classes
        centers[:, 0] = radius * np.cos(angles)
        centers[:, 1] = radius * np.sin(angles)
    labels = np.arange(n) % num_classes
    inputs = centers[labels] + noise * gen.standard_normal((n, dim))
    return Dataset(inputs, labels, num_classes)


def make_char_task(phrase: str, window: int, repeats: int = 8) -> Dataset:
    """Next-character prediction over ``phrase`` repeated ``repeats`` times.

    Each input is the one-hot encoding of ``window`` consecutive characters,
    concatenated; the label is the index of the following character.
    """
    if not phrase:
        raise ParameterError("phrase must be nonempty")
    if window < 1 or len(phrase) <= window:
        raise ParameterError("need len(phrase) > window >= 1")
    if repeats < 1:
        raise ParameterError("repeats must be >= 1")
    vocab = "".join(sorted(set(phrase)))
    index = {c: i for i, c in enumerate(vocab)}
    corpus = np.array([index[c] for c in phrase * repeats], dtype=np.int64)
    v = len(vocab)
    n = corpus.size - window
    inputs = np.zeros((n, window * v))
    for k in range(window):
        inputs[np.arange(n), k * v + corpus[k:k + n]] = 1.0
    return Dataset(inputs, corpus[window:], max(v, 2), vocab=vocab)


def stratified_split(pool: Dataset, probe_size: int, rng: RngStream) -> tuple[Dataset, ProbeSet]:
    """Carve a class-balanced probe out of ``pool``; the rest is training data.

    Classes are visited round-robin so the probe holds ``probe_size //
    num_classes`` examples per class (plus one for the first few when it does
    not divide evenly). Classes absent from the pool are skipped.
    """
    gen = rng.generator()
    by_class = [gen.permutation(np.flatnonzero(pool.labels == c)).tolist() for c in range(pool.num_classes)]
    chosen: list[int] = []
    c = 0
    while len(chosen) < probe_size:
        if not any(by_class):
            raise ParameterError(f"pool too small for a probe of {probe_size}")
        if by_class[c]:
            chosen.append(by_class[c].pop())
        c = (c + 1) % pool.num_classes
    mask = np.ones(len(pool), dtype=bool)
    mask[chosen] = False
    train = pool.subset(np.flatnonzero(mask))
    return train, ProbeSet(pool.subset(sorted(chosen)), train=train)


def save_dataset_csv(data: Dataset, path: str | Path) -> None:
    """One row per example: features..., label."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(data.dim)] + ["label"])
        for row, label in zip(data.inputs, data.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def load_dataset_csv(path: str | Path, num_classes: int | None = None) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        rows = [r for r in reader if r]
    inputs = np.array([[float(v) for v in r[:-1]] for r in rows], dtype=np.float64)
    labels = np.array([int(r[-1]) for r in rows], dtype=np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 2
    return Dataset(inputs.reshape(len(rows), -1), labels, num_classes)
