"""VAMP-2 scoring and training of heads on lagged feature pairs.

The score is the squared Frobenius norm of the whitened time-lagged
correlation matrix.  Features are mean-centered within each batch before
the correlations are formed, which removes the trivial constant mode, so a
perfect d_o-dimensional featurization of a reversible chain scores the sum
of its squared non-unit eigenvalues.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .dataset import admissible_starts
from .errors import ConfigError, NumericalError
from .heads import Geom2vecHead
from .optim import EarlyStop, Optimizer

__all__ = [
    "CorrelationSet",
    "VampConfig",
    "correlation_matrices",
    "inv_sqrt_sym",
    "vamp2_score",
    "vamp2_score_graph",
    "MlpVampnet",
    "TokenVampnet",
    "TokenData",
    "MatrixData",
    "train_vampnet",
    "transform_cvs",
    "write_score_curves",
]


@dataclass(frozen=True)
class CorrelationSet:
    c00: np.ndarray
    c0t: np.ndarray
    ctt: np.ndarray
    mean0: np.ndarray
    meant: np.ndarray


@dataclass(frozen=True)
class VampConfig:
    d_o: int = 2
    lag_ns: float | None = None
    batch_size: int = 5000
    max_epochs: int = 20
    train_patience: int = 500
    valid_patience: int = 10
    valid_interval: int = 10
    learning_rate: float = 2e-4
    tie_weights: bool = True
    eps: float = 1e-6

    def __post_init__(self):
        if self.batch_size < self.d_o + 1:
            raise ConfigError(
                f"batch_size {self.batch_size} must be at least d_o+1 = {self.d_o + 1}"
            )


def correlation_matrices(chi0, chit):
    """Batch correlation matrices on mean-centered features.

    chi0, chit: (B, d) arrays.  C00 = X0^T X0 / B and so on, after removing
    each column's batch mean.
    """
    chi0 = np.asarray(chi0, dtype=np.float64)
    chit = np.asarray(chit, dtype=np.float64)
    b = chi0.shape[0]
    if b < 2:
        raise ConfigError("need at least 2 samples for correlation matrices")
    mean0 = chi0.mean(axis=0)
    meant = chit.mean(axis=0)
    x0 = chi0 - mean0
    xt = chit - meant
    return CorrelationSet(
        c00=x0.T @ x0 / b,
        c0t=x0.T @ xt / b,
        ctt=xt.T @ xt / b,
        mean0=mean0,
        meant=meant,
    )


def inv_sqrt_sym(c, eps=1e-6):
    """Inverse matrix square root via eigendecomposition with clamping.

    Eigenvalues below ``eps`` are raised to ``eps`` before inversion, which
    regularizes rank-deficient correlation matrices.
    """
    c = np.asarray(c, dtype=np.float64)
    if np.abs(c - c.T).max() > 1e-8:
        raise NumericalError("matrix is not symmetric")
    w, u = np.linalg.eigh(c)
    w = np.maximum(w, eps)
    return (u * w**-0.5) @ u.T


def vamp2_score(cs, eps=1e-6):
    """|| C00^-1/2 C0t Ctt^-1/2 ||_F^2 with regularized inverse roots."""
    m = inv_sqrt_sym(cs.c00, eps) @ cs.c0t @ inv_sqrt_sym(cs.ctt, eps)
    return float((m * m).sum())


def _inv_sqrt_graph(c, eps):
    w, u = ad.eigh(c)
    w = ad.clamp_min(w, eps)
    scaled = u * ad.reshape(w**-0.5, (1, -1))
    return ad.matmul(scaled, ad.swapaxes(u, 0, 1))


def vamp2_score_graph(chi0, chit, eps=1e-6):
    """Differentiable VAMP-2 score of two (B, d) feature Tensors."""
    b = chi0.shape[0]
    x0 = chi0 - ad.tmean(chi0, axis=0, keepdims=True)
    xt = chit - ad.tmean(chit, axis=0, keepdims=True)
    c00 = ad.matmul(ad.swapaxes(x0, 0, 1), x0) * (1.0 / b)
    c0t = ad.matmul(ad.swapaxes(x0, 0, 1), xt) * (1.0 / b)
    ctt = ad.matmul(ad.swapaxes(xt, 0, 1), xt) * (1.0 / b)
    m = ad.matmul(ad.matmul(_inv_sqrt_graph(c00, eps), c0t), _inv_sqrt_graph(ctt, eps))
    return ad.tsum(m * m)


# ---------------------------------------------------------------------------
# models and data adapters
# ---------------------------------------------------------------------------


class MlpVampnet(nn.Module):
    """MLP head over flat per-frame feature vectors."""

    def __init__(self, n_inputs, d_o, hidden=64, seed=0, dropout=0.0, dtype=np.float64):
        rng = np.random.default_rng(seed)
        self.mlp = nn.MLP([n_inputs, hidden, hidden, d_o], rng, dtype=dtype, dropout=dropout)

    def __call__(self, batch, rng=None):
        return self.mlp(ad.Tensor(np.asarray(batch, dtype=np.float64)), rng=rng)


class TokenVampnet(nn.Module):
    """Token-mixer head over (scalar, vector, global) token batches."""

    def __init__(self, head: Geom2vecHead):
        self.head = head

    def __call__(self, batch, rng=None):
        xs, vs, gf = batch
        return self.head.forward_tokens(
            np.asarray(xs, dtype=np.float64),
            np.asarray(vs, dtype=np.float64),
            global_features=None if gf is None else np.asarray(gf, dtype=np.float64),
            rng=rng,
        )


class TokenData:
    """Pairs archive token blocks with optional global-token inputs."""

    def __init__(self, scalar, vector, global_features=None):
        self.scalar = np.asarray(scalar)
        self.vector = None if vector is None else np.asarray(vector)
        self.global_features = None if global_features is None else np.asarray(global_features)

    @classmethod
    def from_archive(cls, archive, global_features=None):
        vector = archive.vector
        if vector is None:
            f, m, d = archive.scalar.shape
            vector = np.zeros((f, m, 3, d), dtype=archive.scalar.dtype)
        return cls(archive.scalar, vector, global_features)

    @property
    def n_frames(self):
        return self.scalar.shape[0]

    def batch(self, idx):
        gf = None if self.global_features is None else self.global_features[idx]
        return self.scalar[idx], self.vector[idx], gf


class MatrixData:
    """Plain (F, D) feature matrix."""

    def __init__(self, features):
        self.features = np.asarray(features)

    @property
    def n_frames(self):
        return self.features.shape[0]

    def batch(self, idx):
        return self.features[idx]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CvProjection:
    """Affine map from raw head outputs to singular-value-ordered CVs."""

    mean: np.ndarray               # (d_o,)
    matrix: np.ndarray             # (d_o, d_o); columns ordered by singular value
    singular_values: np.ndarray    # (d_o,) descending

    def __call__(self, raw_outputs):
        return (np.asarray(raw_outputs) - self.mean) @ self.matrix


@dataclass
class VampResult:
    model: object
    model_lagged: object
    curves: list                   # rows (step, train_score, valid_score or nan)
    best_valid: float
    best_step: int
    projection: CvProjection | None = None


def estimate_cv_projection(model, data, split, lag_frames, eps=1e-6, max_pairs=20000, seed=0):
    """Fit the singular-function readout on training pairs.

    Whitening the time-lagged correlation of the raw outputs and taking its
    left singular vectors orders the learned CVs from slowest down.
    """
    starts = admissible_starts(split, lag_frames, "train")
    if len(starts) > max_pairs:
        rng = np.random.default_rng(seed)
        starts = np.sort(rng.choice(starts, size=max_pairs, replace=False))
    with ad.no_grad():
        chi0 = np.asarray(model(data.batch(starts)).data)
        chit = np.asarray(model(data.batch(starts + lag_frames)).data)
    cs = correlation_matrices(chi0, chit)
    s00 = inv_sqrt_sym(cs.c00, eps)
    stt = inv_sqrt_sym(cs.ctt, eps)
    u, sigma, _ = np.linalg.svd(s00 @ cs.c0t @ stt)
    return CvProjection(mean=cs.mean0, matrix=s00 @ u, singular_values=sigma)


def _clone_model(model):
    import copy

    return copy.deepcopy(model)


def train_vampnet(model, data, split, lag_frames, cfg, seed=0):
    """Maximize the batch VAMP-2 score over lagged pairs.

    The same head is applied at both ends of each pair when
    ``cfg.tie_weights`` (the default); otherwise a structural copy with
    independent parameters handles the lagged end.  Validation batches are
    drawn from the validation suffix every ``valid_interval`` steps, and the
    parameters with the best validation score are restored at the end.
    """
    rng = np.random.default_rng(seed)
    model_lagged = model if cfg.tie_weights else _clone_model(model)
    params = {f"m0.{k}": v for k, v in model.named_parameters().items()}
    if not cfg.tie_weights:
        params.update({f"mt.{k}": v for k, v in model_lagged.named_parameters().items()})
    opt = Optimizer(params, lr=cfg.learning_rate, mode="adam_atan2")
    stopper = EarlyStop(
        train_patience=cfg.train_patience,
        valid_patience=cfg.valid_patience,
        valid_interval=cfg.valid_interval,
    )

    train_starts = admissible_starts(split, lag_frames, "train")
    valid_starts = admissible_starts(split, lag_frames, "valid")
    steps_per_epoch = max(1, len(train_starts) // cfg.batch_size)

    def score_batch(starts, training):
        t0 = starts
        t1 = starts + lag_frames
        drop_rng = rng if training else None
        chi0 = model(data.batch(t0), rng=drop_rng)
        chit = model_lagged(data.batch(t1), rng=drop_rng)
        return vamp2_score_graph(chi0, chit, eps=cfg.eps)

    def sample(starts, size):
        return starts[rng.integers(0, len(starts), size=size)]

    curves = []
    best_valid = -np.inf
    best_step = -1
    best_arrays = {k: v.data.copy() for k, v in params.items()}
    step = 0
    stop = False
    for _ in range(cfg.max_epochs):
        if stop:
            break
        for _ in range(steps_per_epoch):
            step += 1
            score = score_batch(sample(train_starts, cfg.batch_size), training=True)
            value = score.item()
            if not np.isfinite(value):
                raise NumericalError(
                    "non-finite VAMP-2 score: batch too small or feature rank collapse; "
                    "increase batch_size or eps"
                )
            opt.zero_grad()
            (-score).backward()
            opt.step()
            valid_value = np.nan
            if step % cfg.valid_interval == 0:
                with ad.no_grad():
                    vscore = score_batch(sample(valid_starts, cfg.batch_size), training=False)
                valid_value = vscore.item()
                if valid_value > best_valid:
                    best_valid = valid_value
                    best_step = step
                    best_arrays = {k: v.data.copy() for k, v in params.items()}
                stop = stopper.update(train_metric=value, valid_metric=valid_value)
            else:
                stop = stopper.update(train_metric=value)
            curves.append((step, value, valid_value))
            if stop:
                break
    for k, p in params.items():
        p.data = best_arrays[k].copy()
    projection = estimate_cv_projection(model, data, split, lag_frames, eps=cfg.eps, seed=seed)
    return VampResult(
        model=model, model_lagged=model_lagged, curves=curves,
        best_valid=best_valid, best_step=best_step, projection=projection,
    )


def transform_cvs(model, data, batch_size=1024, projection=None):
    """Deterministic per-frame CV evaluation (dropout off), float32 (F, d_o).

    With a ``projection`` the raw outputs are mapped to singular-ordered
    CVs (column 0 is the slowest mode).
    """
    outs = []
    with ad.no_grad():
        for start in range(0, data.n_frames, batch_size):
            idx = np.arange(start, min(start + batch_size, data.n_frames))
            raw = np.asarray(model(data.batch(idx)).data)
            if projection is not None:
                raw = projection(raw)
            outs.append(raw.astype(np.float32))
    return np.concatenate(outs, axis=0)


def write_score_curves(path, curves):
    with open(path, "w") as fh:
        fh.write("# step train_score valid_score\n")
        for step, tr, va in curves:
            fh.write(f"{step} {tr:.10e} {va:.10e}\n")
