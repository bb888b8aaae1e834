"""Matrix-factorization scorer with analytic BCE gradients and local SGD.

The client-side objective is the summed binary cross-entropy over the
sampled (item, label) pairs; one SGD step uses the gradient of that sum
over the mini-batch. All in-memory math is float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BCE_EPS = 1e-7

CHECKPOINT_MAGIC = b"FEMB"
CHECKPOINT_VERSION = 1


class ClientTrainingError(RuntimeError):
    """Local training produced a non-finite loss or gradient (lr too high?)."""


@dataclass
class TrainConfig:
    lr: float = 0.1
    local_epochs: int = 2
    batch_size: int = 256
    neg_ratio: int = 4


@dataclass
class SparseGradient:
    """Row-indexed delta matrix: only touched, nonzero rows are stored.

    ``indices`` is sorted and unique; ``values`` has one row per index.
    """

    indices: np.ndarray
    values: np.ndarray
    dim: int

    @classmethod
    def empty(cls, dim: int) -> "SparseGradient":
        return cls(np.zeros(0, dtype=np.int64), np.zeros((0, dim)), dim)

    @classmethod
    def from_rows(cls, indices, values, dim=None) -> "SparseGradient":
        """Build from (possibly unsorted) rows, dropping all-zero rows."""
        indices = np.asarray(indices, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        if dim is None:
            dim = values.shape[1]
        keep = np.any(values != 0.0, axis=1)
        indices, values = indices[keep], values[keep]
        order = np.argsort(indices, kind="stable")
        return cls(indices[order], values[order].copy(), dim)

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "SparseGradient":
        idx = np.flatnonzero(np.any(dense != 0.0, axis=1))
        return cls(idx.astype(np.int64), dense[idx].copy(), dense.shape[1])

    @property
    def num_rows(self) -> int:
        return len(self.indices)

    def to_dense(self, num_rows: int) -> np.ndarray:
        dense = np.zeros((num_rows, self.dim))
        dense[self.indices] = self.values
        return dense

    def validate(self, num_items=None):
        assert self.values.shape == (len(self.indices), self.dim)
        assert np.all(np.diff(self.indices) > 0), "indices must be sorted unique"
        assert np.all(np.any(self.values != 0.0, axis=1)), "zero rows must be omitted"
        assert np.all(np.isfinite(self.values))
        if num_items is not None:
            assert np.all((self.indices >= 0) & (self.indices < num_items))


@dataclass
class LocalTrainResult:
    item_delta: SparseGradient
    scoring_params: np.ndarray
    updated_user_embedding: np.ndarray


def sigmoid(z):
    """Numerically stable logistic function (works on scalars and arrays)."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def predict(user_embedding, item_embedding) -> float:
    """Interaction probability: sigmoid of the embedding dot product."""
    return float(sigmoid(np.dot(np.ravel(user_embedding), np.ravel(item_embedding))))


def bce_loss(prediction, label) -> float:
    p = min(max(float(prediction), BCE_EPS), 1.0 - BCE_EPS)
    r = float(label)
    return -(r * np.log(p) + (1.0 - r) * np.log(1.0 - p))


def bce_grad(user_embedding, item_embedding, label):
    """Analytic BCE gradients w.r.t. (user, item) embeddings.

    d/dp = (sigmoid(p.q) - r) * q   and symmetrically for q.
    """
    p = np.ravel(user_embedding)
    q = np.ravel(item_embedding)
    g = sigmoid(np.dot(p, q)) - float(label)
    return g * q, g * p


def init_embeddings(rows: int, dim: int, rng) -> np.ndarray:
    """I.i.d. normal(0, 0.01) initialization, shared by server and clients."""
    return rng.normal(0.0, 0.01, size=(rows, dim))


def local_train(user, item_matrix, scoring_params, user_embedding,
                dataset, cfg: TrainConfig, rng) -> LocalTrainResult:
    """Run ``cfg.local_epochs`` passes of mini-batch SGD on one client's data.

    ``item_matrix`` is the client's current item-embedding snapshot; it is not
    mutated. Returns the per-row item delta (trained minus snapshot, zero rows
    dropped), the scoring parameters (pass-through for MF) and the updated
    user embedding, which never leaves the client.
    """
    from .data import sample_training_batch

    q_local = np.array(item_matrix, dtype=np.float64)
    p = np.array(np.ravel(user_embedding), dtype=np.float64)
    lr = cfg.lr
    for _ in range(cfg.local_epochs):
        items, labels = sample_training_batch(dataset, user, cfg.neg_ratio, rng)
        order = rng.permutation(len(items))
        items, labels = items[order], labels[order]
        for start in range(0, len(items), cfg.batch_size):
            b_items = items[start:start + cfg.batch_size]
            b_labels = labels[start:start + cfg.batch_size]
            q = q_local[b_items]
            g = sigmoid(q @ p) - b_labels
            grad_p = g @ q
            if not np.isfinite(grad_p).all():
                raise ClientTrainingError(
                    f"non-finite gradient for user {user}; reduce the learning rate")
            np.add.at(q_local, b_items, (-lr * g)[:, None] * p[None, :])
            p -= lr * grad_p
    if not np.isfinite(p).all() or not np.isfinite(q_local).all():
        raise ClientTrainingError(
            f"non-finite embeddings after training user {user}; reduce the learning rate")
    delta = SparseGradient.from_dense(q_local - item_matrix)
    return LocalTrainResult(
        item_delta=delta,
        scoring_params=np.array(scoring_params, dtype=np.float64),
        updated_user_embedding=p,
    )


def write_checkpoint(path, matrices: dict):
    """Versioned binary checkpoint of named float64 matrices (bit-exact)."""
    import struct
    from pathlib import Path

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HH", CHECKPOINT_VERSION, len(matrices)))
        for name, mat in matrices.items():
            mat = np.ascontiguousarray(mat, dtype=np.float64)
            if mat.ndim == 1:
                mat = mat[None, :]
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<QQ", mat.shape[0], mat.shape[1]))
            fh.write(mat.tobytes(order="C"))


def read_checkpoint(path) -> dict:
    import struct

    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError("not a checkpoint file")
        version, count = struct.unpack("<HH", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        out = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            rows, dim = struct.unpack("<QQ", fh.read(16))
            data = np.frombuffer(fh.read(rows * dim * 8), dtype=np.float64)
            out[name] = data.reshape(rows, dim).copy()
        return out
