"""State Predictive Information Bottleneck with iterative label refinement.

A variational encoder maps per-frame features to a low-dimensional latent;
a categorical decoder predicts the state label a lag time ahead.  Labels
start from k-means clusters and are periodically refined to the decoder's
argmax under the deterministic latent, dropping states that lose all their
frames, so training discovers the metastable decomposition and the label
count simultaneously.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .dataset import admissible_starts
from .errors import ConfigError, DataError
from .optim import Optimizer

__all__ = [
    "SpibConfig",
    "LabelSeries",
    "SpibModel",
    "kmeans_init",
    "sample_latent",
    "vamp_prior_logpdf",
    "spib_loss",
    "refine_labels",
    "train_spib",
    "msm_from_labels",
    "write_labels",
    "read_labels",
    "write_msm",
]

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class SpibConfig:
    d_z: int = 2
    beta: float = 0.01
    n_initial_states: int = 100
    lag_ns: float | None = None
    refinement_frequency: int = 5      # epochs between label refinements
    n_pseudo_inputs: int = 32
    patience: int = 5                  # validation events without improvement
    learning_rate: float = 2e-4
    batch_size: int = 1000
    max_epochs: int = 100
    hidden: int = 64
    dropout: float = 0.2

    def __post_init__(self):
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.d_z < 1:
            raise ConfigError("d_z must be >= 1")
        if self.n_initial_states < 2:
            raise ConfigError("need at least 2 initial states")


@dataclass(frozen=True)
class LabelSeries:
    labels: np.ndarray          # (F,) integer labels
    active: np.ndarray          # sorted distinct labels currently in play

    def __post_init__(self):
        if len(self.active) == 0:
            raise DataError("active label set is empty")
        if not np.all(np.isin(self.labels, self.active)):
            raise DataError("labels outside the active set")

    @property
    def n_states(self):
        return len(self.active)


# ---------------------------------------------------------------------------
# k-means initialization
# ---------------------------------------------------------------------------


def kmeans_init(cv_series, k, seed=0, max_iter=200, tol=1e-6):
    """Lloyd's algorithm with k-means++ seeding over CV space.

    Returns a LabelSeries of nearest-centroid assignments.
    """
    x = np.asarray(cv_series, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    f = len(x)
    if k > f:
        raise ConfigError(f"k={k} exceeds the number of frames {f}")
    rng = np.random.default_rng(seed)
    # k-means++ seeding
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(f)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[i:] = x[rng.integers(0, f, size=k - i)]
            break
        centers[i] = x[rng.choice(f, p=d2 / total)]
        d2 = np.minimum(d2, ((x - centers[i]) ** 2).sum(axis=1))
    assign = None
    for _ in range(max_iter):
        dist = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = dist.argmin(axis=1)
        new_centers = centers.copy()
        for j in range(k):
            members = x[assign == j]
            if len(members):
                new_centers[j] = members.mean(axis=0)
        shift = np.abs(new_centers - centers).max()
        centers = new_centers
        if shift < tol:
            break
    dist = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    assign = dist.argmin(axis=1)
    return LabelSeries(labels=assign.astype(np.int64), active=np.unique(assign))


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


class SpibModel(nn.Module):
    """Gaussian encoder, categorical decoder, and a mixture-of-posteriors prior.

    The prior evaluates the encoder at learned pseudo-inputs ``u`` with
    positive mixture weights ``omega = exp(log_omega)``.
    """

    def __init__(self, n_inputs, n_labels, cfg, pseudo_init, seed=0, dtype=np.float64):
        rng = np.random.default_rng(seed)
        h, d_z = cfg.hidden, cfg.d_z
        self.cfg = cfg
        self.n_labels = n_labels
        self.trunk = nn.MLP([n_inputs, h, h], rng, dtype=dtype, dropout=cfg.dropout)
        self.mu_head = nn.Linear(h, d_z, rng, dtype=dtype)
        self.logvar_head = nn.Linear(h, d_z, rng, dtype=dtype)
        self.dec_trunk = nn.MLP([d_z, h, h], rng, dtype=dtype, dropout=cfg.dropout)
        self.dec_out = nn.Linear(h, n_labels, rng, dtype=dtype)
        pseudo = np.asarray(pseudo_init, dtype=dtype)
        if pseudo.shape != (cfg.n_pseudo_inputs, n_inputs):
            raise ConfigError("pseudo_init must have shape (n_pseudo_inputs, n_inputs)")
        self.pseudo_inputs = nn.parameter(pseudo.copy())
        self.log_omega = nn.parameter(np.zeros(cfg.n_pseudo_inputs, dtype=dtype))

    def encode(self, features, rng=None):
        """Deterministic encoder outputs (mu, logvar), each (..., d_z)."""
        feats = features if isinstance(features, ad.Tensor) else ad.Tensor(
            np.asarray(features, dtype=np.float64)
        )
        hidden = ad.silu(self.trunk(feats, rng=rng))
        return self.mu_head(hidden), self.logvar_head(hidden)

    def decoder_logits(self, z, rng=None):
        return self.dec_out(ad.silu(self.dec_trunk(z, rng=rng)))

    def prune_labels(self, keep):
        """Drop decoder output columns for labels not in ``keep``."""
        keep = np.asarray(keep, dtype=np.intp)
        self.dec_out.weight.data = self.dec_out.weight.data[:, keep].copy()
        self.dec_out.bias.data = self.dec_out.bias.data[keep].copy()
        self.n_labels = len(keep)


def sample_latent(mu, logvar, noise):
    """Pathwise sample z = mu + exp(logvar/2) * eps (differentiable in both)."""
    eps = noise if isinstance(noise, ad.Tensor) else ad.Tensor(np.asarray(noise))
    return mu + ad.exp(logvar * 0.5) * eps


def _gaussian_logpdf(z, mu, logvar):
    """Diagonal Gaussian log density, summed over the last axis."""
    delta = z - mu
    return ad.tsum(-(0.5 * _LOG_2PI) - logvar * 0.5 - delta * delta * ad.exp(-logvar) * 0.5, axis=-1)


def vamp_prior_logpdf(model, z):
    """log r(z) over the mixture of encoder posteriors at the pseudo-inputs."""
    mu_u, logvar_u = model.encode(model.pseudo_inputs)
    b = z.shape[0] if z.ndim > 1 else 1
    d_z = mu_u.shape[-1]
    z2 = ad.reshape(z, (b, 1, d_z))
    mu2 = ad.reshape(mu_u, (1, -1, d_z))
    lv2 = ad.reshape(logvar_u, (1, -1, d_z))
    log_comp = _gaussian_logpdf(z2, mu2, lv2)                 # (B, P)
    log_w = model.log_omega - ad.logsumexp(model.log_omega, axis=0, keepdims=True)
    return ad.logsumexp(log_comp + ad.reshape(log_w, (1, -1)), axis=1)


def spib_loss(model, features, labels, beta, noise, rng=None):
    """Monte Carlo bound: mean[ log q(s|z) - beta (log p(z|h) - log r(z)) ].

    One latent sample per item via ``noise`` (B, d_z); maximized by the
    trainer (the optimizer minimizes its negation).
    """
    labels = np.asarray(labels, dtype=np.intp)
    mu, logvar = model.encode(features, rng=rng)
    z = sample_latent(mu, logvar, noise)
    logits = model.decoder_logits(z, rng=rng)
    log_probs = logits - ad.logsumexp(logits, axis=-1, keepdims=True)
    b = len(labels)
    picked = ad.getitem(log_probs, (np.arange(b), labels))
    log_posterior = _gaussian_logpdf(z, mu, logvar)
    log_prior = vamp_prior_logpdf(model, z)
    return ad.tmean(picked - beta * (log_posterior - log_prior))


def refine_labels(model, features, batch_size=4096):
    """Assign every frame to argmax_s q(s | mu(h)) and drop empty states.

    Deterministic latents (z = mu) are used.  Surviving states are
    reindexed to consecutive integers matching the pruned decoder columns,
    so refining twice without a parameter update is a no-op.
    """
    features = np.asarray(features, dtype=np.float64)
    preds = np.empty(len(features), dtype=np.int64)
    with ad.no_grad():
        for start in range(0, len(features), batch_size):
            chunk = features[start: start + batch_size]
            mu, _ = model.encode(chunk)
            logits = model.decoder_logits(mu)
            preds[start: start + len(chunk)] = logits.data.argmax(axis=-1)
    populated = np.unique(preds)
    if len(populated) == 1:
        warnings.warn("label refinement collapsed to a single state", stacklevel=2)
    if len(populated) < model.n_labels:
        model.prune_labels(populated)
        remap = np.full(populated.max() + 1, -1, dtype=np.int64)
        remap[populated] = np.arange(len(populated))
        preds = remap[preds]
    return LabelSeries(labels=preds, active=np.arange(len(populated)))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class SpibResult:
    model: SpibModel
    labels: LabelSeries
    ib_coords: np.ndarray       # (F, d_z) deterministic latents
    history: list               # rows (epoch, train_loss, valid_loss, n_states)
    converged: bool


def train_spib(features, initial_labels, split, lag_frames, cfg, seed=0):
    """Alternate gradient epochs with label refinement until stable.

    Pairs (t, t+lag) are drawn from the training partition of ``split``;
    the loss target is the label at t+lag.  Every
    ``cfg.refinement_frequency`` epochs all frames are relabeled and empty
    states dropped.  Training stops once the active set is unchanged across
    two consecutive refinements and the validation loss has not improved
    for ``cfg.patience`` validation events (one per epoch).
    """
    features = np.asarray(features, dtype=np.float64)
    rng = np.random.default_rng(seed)
    labels = np.asarray(initial_labels.labels, dtype=np.int64).copy()
    n_labels = int(labels.max()) + 1

    pseudo_rows = rng.choice(len(features), size=cfg.n_pseudo_inputs, replace=False)
    model = SpibModel(features.shape[1], n_labels, cfg, features[pseudo_rows], seed=seed + 1)
    opt = Optimizer(model.named_parameters(), lr=cfg.learning_rate, mode="adam_atan2")

    train_starts = admissible_starts(split, lag_frames, "train")
    valid_starts = admissible_starts(split, lag_frames, "valid")
    steps_per_epoch = max(1, len(train_starts) // cfg.batch_size)

    def batch_loss(starts, rng_dropout):
        noise = rng.standard_normal((len(starts), cfg.d_z))
        return spib_loss(
            model, features[starts], labels[starts + lag_frames], cfg.beta, noise,
            rng=rng_dropout,
        )

    history = []
    best_valid = -np.inf
    valid_stall = 0
    stable_refinements = 0
    converged = False
    for epoch in range(cfg.max_epochs):
        epoch_losses = []
        for _ in range(steps_per_epoch):
            starts = train_starts[rng.integers(0, len(train_starts), size=cfg.batch_size)]
            loss = batch_loss(starts, rng)
            opt.zero_grad()
            (-loss).backward()
            opt.step()
            epoch_losses.append(loss.item())
        with ad.no_grad():
            vstarts = valid_starts[rng.integers(0, len(valid_starts), size=cfg.batch_size)]
            valid_loss = batch_loss(vstarts, None).item()
        if valid_loss > best_valid:
            best_valid = valid_loss
            valid_stall = 0
        else:
            valid_stall += 1
        history.append((epoch, float(np.mean(epoch_losses)), valid_loss, model.n_labels))
        if (epoch + 1) % cfg.refinement_frequency == 0:
            before = model.n_labels
            refined = refine_labels(model, features)
            labels = refined.labels
            if model.n_labels == before:
                stable_refinements += 1
            else:
                stable_refinements = 0
                # label set changed: give the optimizer a fresh state
                opt = Optimizer(model.named_parameters(), lr=cfg.learning_rate, mode="adam_atan2")
            if stable_refinements >= 2 and valid_stall >= cfg.patience:
                converged = True
                break
    final = refine_labels(model, features)
    with ad.no_grad():
        coords = np.concatenate(
            [
                model.encode(features[s: s + 4096])[0].data
                for s in range(0, len(features), 4096)
            ]
        )
    return SpibResult(model=model, labels=final, ib_coords=coords, history=history,
                      converged=converged)


# ---------------------------------------------------------------------------
# Markov state model from labels
# ---------------------------------------------------------------------------


def msm_from_labels(labels, lag_frames, runs=None):
    """Row-normalized transition counts at the given lag.

    ``runs`` lists contiguous (start, stop) frame ranges; pairs never cross
    run borders.  Returns (T, pi) with pi the empirical label frequencies.
    """
    labels = np.asarray(labels.labels if isinstance(labels, LabelSeries) else labels)
    if lag_frames < 1:
        raise ConfigError("lag_frames must be positive")
    if runs is None:
        runs = ((0, len(labels)),)
    states = np.unique(labels)
    k = len(states)
    index = {s: i for i, s in enumerate(states)}
    counts = np.zeros((k, k))
    for start, stop in runs:
        for t in range(start, stop - lag_frames):
            counts[index[labels[t]], index[labels[t + lag_frames]]] += 1.0
    rowsum = counts.sum(axis=1)
    if np.any(rowsum == 0):
        dead = states[rowsum == 0]
        raise DataError(f"label(s) {dead.tolist()} have no outgoing pairs at lag {lag_frames}")
    transition = counts / rowsum[:, None]
    populations = np.bincount(np.searchsorted(states, labels), minlength=k).astype(float)
    populations /= populations.sum()
    return transition, populations


def write_labels(path, labels):
    arr = labels.labels if isinstance(labels, LabelSeries) else np.asarray(labels)
    with open(path, "w") as fh:
        fh.write("# frame label\n")
        for t, s in enumerate(arr):
            fh.write(f"{t} {int(s)}\n")


def read_labels(path):
    rows = np.loadtxt(path, dtype=np.int64, ndmin=2)
    labels = rows[:, 1]
    return LabelSeries(labels=labels, active=np.unique(labels))


def write_msm(path, transition, populations):
    with open(path, "w") as fh:
        fh.write("# populations " + " ".join(f"{p:.10e}" for p in populations) + "\n")
        for row in transition:
            fh.write(" ".join(f"{val:.10e}" for val in row) + "\n")
