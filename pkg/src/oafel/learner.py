"""Models, datasets, partitioning, and local gradient computation.

Models expose a flat-parameter-vector interface: loss/gradient take the
parameter vector ``w`` plus a feature/label batch, so the aggregation and
scheduling layers never see model internals.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np


class IndivisibleDataset(ValueError):
    """Dataset size does not divide into the requested equal shards."""


class InfeasibleLabelAssignment(ValueError):
    """The label-cap partition cannot be satisfied for this dataset."""


class BatchTooLarge(ValueError):
    """Requested batch exceeds the shard size."""


class InsufficientHistory(ValueError):
    """Smoothness estimation needs at least two recorded rounds."""


@dataclass(frozen=True)
class Dataset:
    """Immutable feature/label table. Labels are int64; regression-style
    data uses a single class with all-zero labels."""

    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=float)
        labs = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim != 2:
            raise ValueError("features must be 2-D (samples x dims)")
        if labs.shape != (feats.shape[0],):
            raise ValueError("labels must be 1-D with one entry per sample")
        if self.class_count < 1:
            raise ValueError("class_count must be >= 1")
        if feats.shape[0] and (labs.min() < 0 or labs.max() >= self.class_count):
            raise ValueError("labels out of range for class_count")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labs)

    def __len__(self) -> int:
        return self.features.shape[0]

    def subset(self, indices: np.ndarray) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.class_count)


@dataclass(frozen=True)
class Partition:
    """Disjoint equal-size index shards over a parent dataset."""

    shard_indices: tuple[np.ndarray, ...]
    mode: str

    def shards(self, data: Dataset) -> list[Dataset]:
        return [data.subset(idx) for idx in self.shard_indices]


@dataclass(frozen=True)
class LocalUpdateResult:
    """Effective gradient a device would transmit plus its bookkeeping."""

    gradient: np.ndarray
    norm_sq: float
    samples_used: int


class QuadraticModel:
    """Per-sample loss 0.5 * (w - x)^T A (w - x) with shared curvature A.

    ``curvature`` may be a length-s vector (diagonal A) or a symmetric
    positive-definite s x s matrix. Smoothness and strong-convexity
    constants are the extreme eigenvalues of A.
    """

    def __init__(self, curvature: np.ndarray):
        A = np.asarray(curvature, dtype=float)
        if A.ndim == 1:
            if np.any(A <= 0):
                raise ValueError("diagonal curvature must be positive")
            self._diag = A.copy()
            self._A = None
            self.dim = A.shape[0]
            self.l_smooth = float(A.max())
            self.mu = float(A.min())
        elif A.ndim == 2 and A.shape[0] == A.shape[1]:
            if not np.allclose(A, A.T):
                raise ValueError("curvature matrix must be symmetric")
            eigs = np.linalg.eigvalsh(A)
            if eigs[0] <= 0:
                raise ValueError("curvature matrix must be positive definite")
            self._diag = None
            self._A = A.copy()
            self.dim = A.shape[0]
            self.l_smooth = float(eigs[-1])
            self.mu = float(eigs[0])
        else:
            raise ValueError("curvature must be a vector or a square matrix")

    def _apply(self, d: np.ndarray) -> np.ndarray:
        if self._diag is not None:
            return d * self._diag
        return d @ self._A

    def loss(self, w: np.ndarray, X: np.ndarray, y=None) -> float:
        d = w[None, :] - X
        return float(0.5 * np.mean(np.sum(d * self._apply(d), axis=1)))

    def gradient(self, w: np.ndarray, X: np.ndarray, y=None) -> np.ndarray:
        d = w[None, :] - X
        return self._apply(d).mean(axis=0)

    def gradient_per_sample(self, w: np.ndarray, X: np.ndarray, y=None) -> np.ndarray:
        return self._apply(w[None, :] - X)

    def accuracy(self, w: np.ndarray, X: np.ndarray, y=None) -> float:
        return float("nan")


class MlpSoftmax:
    """Two-layer perceptron: ReLU hidden layer, softmax output, mean
    cross-entropy loss. Parameters live in one flat float64 vector."""

    def __init__(self, layer_sizes: Sequence[int] = (784, 64, 10)):
        if len(layer_sizes) != 3 or any(v < 1 for v in layer_sizes):
            raise ValueError("layer_sizes must be three positive integers")
        self.d_in, self.d_hidden, self.d_out = (int(v) for v in layer_sizes)
        self._n1 = self.d_in * self.d_hidden
        self._n2 = self._n1 + self.d_hidden
        self._n3 = self._n2 + self.d_hidden * self.d_out
        self.dim = self._n3 + self.d_out

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        w = np.zeros(self.dim)
        W1 = rng.normal(0.0, np.sqrt(2.0 / self.d_in), size=(self.d_in, self.d_hidden))
        W2 = rng.normal(
            0.0, np.sqrt(1.0 / self.d_hidden), size=(self.d_hidden, self.d_out)
        )
        w[: self._n1] = W1.ravel()
        w[self._n2 : self._n3] = W2.ravel()
        return w

    def _unpack(self, w: np.ndarray):
        W1 = w[: self._n1].reshape(self.d_in, self.d_hidden)
        b1 = w[self._n1 : self._n2]
        W2 = w[self._n2 : self._n3].reshape(self.d_hidden, self.d_out)
        b2 = w[self._n3 :]
        return W1, b1, W2, b2

    def _forward(self, w: np.ndarray, X: np.ndarray):
        W1, b1, W2, b2 = self._unpack(w)
        hidden = np.maximum(X @ W1 + b1, 0.0)
        logits = hidden @ W2 + b2
        logits = logits - logits.max(axis=1, keepdims=True)
        expl = np.exp(logits)
        probs = expl / expl.sum(axis=1, keepdims=True)
        return hidden, probs

    def loss(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
        _, probs = self._forward(w, X)
        picked = probs[np.arange(X.shape[0]), y]
        return float(-np.mean(np.log(np.maximum(picked, 1e-300))))

    def _backward_common(self, w: np.ndarray, X: np.ndarray, y: np.ndarray):
        W1, b1, W2, b2 = self._unpack(w)
        hidden, probs = self._forward(w, X)
        delta_out = probs.copy()
        delta_out[np.arange(X.shape[0]), y] -= 1.0
        delta_hidden = delta_out @ W2.T
        delta_hidden[hidden <= 0.0] = 0.0
        return hidden, delta_out, delta_hidden

    def gradient(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        B = X.shape[0]
        hidden, delta_out, delta_hidden = self._backward_common(w, X, y)
        g = np.empty(self.dim)
        g[: self._n1] = (X.T @ delta_hidden).ravel()
        g[self._n1 : self._n2] = delta_hidden.sum(axis=0)
        g[self._n2 : self._n3] = (hidden.T @ delta_out).ravel()
        g[self._n3 :] = delta_out.sum(axis=0)
        g /= B
        return g

    def gradient_per_sample(
        self, w: np.ndarray, X: np.ndarray, y: np.ndarray
    ) -> np.ndarray:
        B = X.shape[0]
        hidden, delta_out, delta_hidden = self._backward_common(w, X, y)
        g = np.empty((B, self.dim))
        g[:, : self._n1] = np.einsum("bi,bj->bij", X, delta_hidden).reshape(B, -1)
        g[:, self._n1 : self._n2] = delta_hidden
        g[:, self._n2 : self._n3] = np.einsum("bi,bj->bij", hidden, delta_out).reshape(
            B, -1
        )
        g[:, self._n3 :] = delta_out
        return g

    def predict(self, w: np.ndarray, X: np.ndarray) -> np.ndarray:
        _, probs = self._forward(w, X)
        return probs.argmax(axis=1)

    def accuracy(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
        return float(np.mean(self.predict(w, X) == y))


def partition_dataset(
    data: Dataset,
    N: int,
    mode: str,
    rng: np.random.Generator,
    m: int | None = None,
) -> Partition:
    """Split ``data`` into N disjoint equal shards.

    ``iid``: a seeded permutation dealt into contiguous blocks.
    ``non_iid``: samples are sorted by label, cut into N*m equal chunks, and
    each device receives m chunks, so each shard touches at most m distinct
    labels. Chunks are dealt randomly; if the random deal exceeds the label
    cap (possible when a label spans many chunk boundaries) a contiguous
    assignment is used, and if even that exceeds the cap the partition is
    infeasible for this dataset.
    """
    n = len(data)
    if mode == "iid":
        if n % N:
            raise IndivisibleDataset(f"{n} samples do not split into {N} shards")
        perm = rng.permutation(n)
        shards = tuple(np.sort(chunk) for chunk in perm.reshape(N, n // N))
        return Partition(shard_indices=shards, mode="iid")
    if mode != "non_iid":
        raise ValueError(f"unknown partition mode {mode!r}")
    if m is None or m < 1:
        raise ValueError("non_iid mode requires m >= 1")
    if n % (N * m):
        raise IndivisibleDataset(f"{n} samples do not split into {N * m} chunks")
    chunk_len = n // (N * m)
    order = np.argsort(data.labels, kind="stable")
    chunks = order.reshape(N * m, chunk_len)

    def build(assignment: np.ndarray) -> tuple[np.ndarray, ...] | None:
        shards = []
        for i in range(N):
            idx = np.sort(np.concatenate([chunks[j] for j in assignment[i]]))
            if np.unique(data.labels[idx]).size > m:
                return None
            shards.append(idx)
        return tuple(shards)

    deal = rng.permutation(N * m).reshape(N, m)
    shards = build(deal)
    if shards is None:
        shards = build(np.arange(N * m).reshape(N, m))
    if shards is None:
        raise InfeasibleLabelAssignment(
            f"cannot cap shards at {m} labels for this label layout"
        )
    return Partition(shard_indices=shards, mode=f"non_iid({m})")


def local_gradient(
    model, w: np.ndarray, shard: Dataset, L_b: int, rng: np.random.Generator
) -> LocalUpdateResult:
    """One mini-batch gradient, drawn without replacement from the shard."""
    if L_b > len(shard):
        raise BatchTooLarge(f"batch {L_b} exceeds shard size {len(shard)}")
    idx = rng.choice(len(shard), size=L_b, replace=False)
    g = model.gradient(w, shard.features[idx], shard.labels[idx])
    return LocalUpdateResult(gradient=g, norm_sq=float(g @ g), samples_used=L_b)


def local_update_multi(
    model,
    w: np.ndarray,
    shard: Dataset,
    K_local: int,
    L_b: int,
    eta: float,
    momentum: float,
    rng: np.random.Generator,
) -> LocalUpdateResult:
    """K_local SGD(+momentum) steps; reports the effective gradient
    (w - w_final) / eta so the server-side update rule is unchanged.

    With K_local == 1 and zero momentum this is exactly one mini-batch
    gradient on the same stream, so it delegates to local_gradient.
    """
    if K_local < 1:
        raise ValueError("K_local must be >= 1")
    if K_local == 1 and momentum == 0.0:
        return local_gradient(model, w, shard, L_b, rng)
    if L_b > len(shard):
        raise BatchTooLarge(f"batch {L_b} exceeds shard size {len(shard)}")
    displacement = np.zeros_like(w)
    velocity = np.zeros_like(w)
    for _ in range(K_local):
        idx = rng.choice(len(shard), size=L_b, replace=False)
        g = model.gradient(w - displacement, shard.features[idx], shard.labels[idx])
        velocity = momentum * velocity + g
        displacement = displacement + eta * velocity
    effective = displacement / eta
    return LocalUpdateResult(
        gradient=effective,
        norm_sq=float(effective @ effective),
        samples_used=K_local * L_b,
    )


def global_full_gradient(model, w: np.ndarray, shards: Sequence[Dataset]) -> np.ndarray:
    """Average of the full-shard gradients, one per device."""
    if not shards:
        raise ValueError("need at least one shard")
    total = np.zeros_like(w)
    for shard in shards:
        total += model.gradient(w, shard.features, shard.labels)
    return total / len(shards)


def estimate_smoothness(
    history: Sequence[tuple[np.ndarray, Mapping[int, np.ndarray]]],
) -> float:
    """Empirical smoothness: max over consecutive rounds and shared devices
    of ||g_new - g_old|| / ||w_new - w_old||. Pairs where the iterate barely
    moved (||dw|| < 1e-12) are skipped to avoid division blow-ups."""
    if len(history) < 2:
        raise InsufficientHistory("need at least two recorded rounds")
    best = 0.0
    for (w_old, g_old), (w_new, g_new) in zip(history[:-1], history[1:]):
        dw = float(np.linalg.norm(w_new - w_old))
        if dw < 1e-12:
            continue
        for dev in g_old.keys() & g_new.keys():
            dg = float(np.linalg.norm(g_new[dev] - g_old[dev]))
            best = max(best, dg / dw)
    return best


def estimate_variance_bound(
    model, shard: Dataset, w: np.ndarray, probe_count: int, rng: np.random.Generator
) -> float:
    """Mean squared deviation of single-sample gradients around their mean,
    estimated from probe_count draws with replacement."""
    if probe_count < 2:
        raise ValueError("probe_count must be >= 2")
    idx = rng.integers(0, len(shard), size=probe_count)
    per = model.gradient_per_sample(w, shard.features[idx], shard.labels[idx])
    centered = per - per.mean(axis=0, keepdims=True)
    return float(np.mean(np.sum(centered * centered, axis=1)))
