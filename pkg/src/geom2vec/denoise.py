"""Self-supervised pretraining: corrupt coordinates, predict the displacement.

The training target for each atom is the Gaussian displacement that was
added to it, standardized per component with training-set statistics, so a
zero predictor scores an MSE of exactly 1.0 and any learning shows up as a
validation MSE below that baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .encoder import Encoder, NeighborList, build_neighbor_list
from .errors import ConfigError, DataError
from .heads import GatedEquivariantBlock
from .optim import Optimizer

__all__ = [
    "DenoiseConfig",
    "DisplacementStats",
    "corrupt_frame",
    "displacement_stats",
    "DenoiseHead",
    "generate_molecule_corpus",
    "pretrain",
    "write_loss_curves",
]


@dataclass(frozen=True)
class DenoiseConfig:
    noise_sigma: float = 0.2        # Angstrom
    epochs: int = 10
    batch_size: int = 100
    learning_rate: float = 5e-4
    validation_size: int = 20

    def __post_init__(self):
        if self.noise_sigma <= 0:
            raise ConfigError("noise_sigma must be positive")


@dataclass(frozen=True)
class DisplacementStats:
    mean: np.ndarray                # (3,)
    std: np.ndarray                 # (3,)

    def standardize(self, displacements):
        return (displacements - self.mean) / self.std


def corrupt_frame(frame, sigma, seed):
    """Add i.i.d. Gaussian noise per coordinate; returns (noisy, displacements)."""
    if sigma <= 0:
        raise ConfigError("sigma must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    eps = sigma * rng.standard_normal(np.shape(frame))
    return np.asarray(frame) + eps, eps


def displacement_stats(displacements):
    """Per-component mean and population std over all atoms and frames."""
    flat = np.concatenate([np.asarray(d).reshape(-1, 3) for d in displacements])
    if len(flat) < 2:
        raise DataError("need at least 2 displacement samples")
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    if np.any(std == 0):
        raise DataError("zero variance displacement component")
    return DisplacementStats(mean=mean, std=std)


class DenoiseHead(nn.Module):
    """Gated equivariant funnel d -> d/2 -> 1; the last vector channel is
    the predicted (standardized) displacement for each atom.

    The final vector projection starts at zero so the untrained model
    predicts exactly zero, pinning the initial MSE at the variance baseline.
    """

    def __init__(self, d, seed=0, dtype=np.float64):
        rng = np.random.default_rng(seed)
        mid = max(d // 2, 1)
        self.block1 = GatedEquivariantBlock(d, mid, rng, dtype=dtype)
        self.block2 = GatedEquivariantBlock(mid, 1, rng, dtype=dtype, zero_init_vector=True)

    def __call__(self, x, v):
        x, v = self.block1(x, v)
        _, v = self.block2(x, v)
        return ad.reshape(v, v.shape[:-2] + (3,))


# ---------------------------------------------------------------------------
# synthetic pretraining corpus
# ---------------------------------------------------------------------------

_BOND_LENGTH = {
    (1, 1): 0.74, (1, 6): 1.09, (1, 7): 1.01, (1, 8): 0.96,
    (6, 6): 1.54, (6, 7): 1.47, (6, 8): 1.43,
    (7, 7): 1.45, (7, 8): 1.40, (8, 8): 1.48,
}


def _bond_length(z1, z2):
    return _BOND_LENGTH[(min(z1, z2), max(z1, z2))]


def generate_molecule_corpus(n_conformers, seed=0, min_atoms=5, max_atoms=15):
    """Random tree-shaped molecules with realistic bond lengths.

    Each conformer is (positions (N, 3), atomic numbers (N,)).  Atoms attach
    to a random existing atom in a random direction; placements closer than
    0.9 Angstrom to any other atom are retried.
    """
    rng = np.random.default_rng(seed)
    elements = np.array([1, 6, 7, 8])
    weights = np.array([0.35, 0.40, 0.13, 0.12])
    corpus = []
    for _ in range(n_conformers):
        n = int(rng.integers(min_atoms, max_atoms + 1))
        z = rng.choice(elements, size=n, p=weights)
        z[0] = 6  # a carbon root keeps trees from starting H-H
        pos = np.zeros((n, 3))
        for i in range(1, n):
            parent = int(rng.integers(0, i))
            length = _bond_length(int(z[parent]), int(z[i]))
            for _ in range(50):
                direction = rng.standard_normal(3)
                direction /= np.linalg.norm(direction)
                cand = pos[parent] + length * direction
                d = np.linalg.norm(pos[:i] - cand, axis=1)
                d[parent] = np.inf
                if np.all(d > 0.9):
                    break
            pos[i] = cand
        corpus.append((pos, z))
    return corpus


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _pack_graphs(conformers, r_cut):
    """Merge conformers into one disconnected graph for a single forward pass."""
    pos_list, z_list, edge_list, dist_list, unit_list = [], [], [], [], []
    offset = 0
    for pos, z in conformers:
        nbr = build_neighbor_list(pos, r_cut)
        pos_list.append(pos)
        z_list.append(z)
        edge_list.append(nbr.edges + offset)
        dist_list.append(nbr.distances)
        unit_list.append(nbr.units)
        offset += len(z)
    nbr = NeighborList(
        edges=np.concatenate(edge_list),
        distances=np.concatenate(dist_list),
        units=np.concatenate(unit_list),
    )
    return np.concatenate(pos_list), np.concatenate(z_list), nbr


@dataclass
class PretrainResult:
    encoder: Encoder
    head: DenoiseHead
    stats: DisplacementStats
    train_curve: list
    valid_curve: list
    best_epoch: int
    best_valid: float
    best_arrays: dict
    diverged: bool = False


def _mse(encoder, head, conformers, targets_std):
    pos, z, nbr = _pack_graphs(conformers, encoder.cfg.r_cut)
    x, v = encoder(pos, z, nbr=nbr)
    pred = head(x, v)
    delta = pred - ad.Tensor(targets_std)
    return ad.tmean(delta * delta)


def pretrain(encoder, conformers, cfg, seed=0):
    """Train encoder+head to predict standardized displacements.

    Per-epoch shuffled minibatches; validation conformers are corrupted once
    (fixed) and standardized with training statistics.  Returns the model
    with the parameters of the lowest-validation-MSE epoch restored.
    """
    rng = np.random.default_rng(seed)
    n = len(conformers)
    if cfg.validation_size >= n:
        raise ConfigError("validation_size must leave at least one training conformer")
    order = rng.permutation(n)
    valid_ids = order[: cfg.validation_size]
    train_ids = order[cfg.validation_size:]

    # training statistics from one corruption pass over the training split
    stats_eps = [corrupt_frame(conformers[i][0], cfg.noise_sigma, rng)[1] for i in train_ids]
    stats = displacement_stats(stats_eps)

    # fixed validation corruption
    valid_set = []
    for i in valid_ids:
        pos, z = conformers[i]
        noisy, eps = corrupt_frame(pos, cfg.noise_sigma, rng)
        valid_set.append(((noisy, z), stats.standardize(eps)))

    head = DenoiseHead(encoder.cfg.d, seed=seed + 1)
    params = {}
    params.update({f"encoder.{k}": v for k, v in encoder.named_parameters().items()})
    params.update({f"head.{k}": v for k, v in head.named_parameters().items()})
    opt = Optimizer(params, lr=cfg.learning_rate, mode="adamw_amsgrad")

    def valid_mse():
        with ad.no_grad():
            frames = [c for c, _ in valid_set]
            targets = np.concatenate([t for _, t in valid_set])
            return _mse(encoder, head, frames, targets).item()

    def snapshot():
        return {k: v.data.copy() for k, v in params.items()}

    train_curve, valid_curve = [], []
    best_valid = np.inf
    best_epoch = -1
    best_arrays = snapshot()
    diverged = False
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(train_ids))
        epoch_losses = []
        for start in range(0, len(perm), cfg.batch_size):
            batch_ids = [train_ids[j] for j in perm[start: start + cfg.batch_size]]
            noisy_batch, target_batch = [], []
            for i in batch_ids:
                pos, z = conformers[i]
                noisy, eps = corrupt_frame(pos, cfg.noise_sigma, rng)
                noisy_batch.append((noisy, z))
                target_batch.append(stats.standardize(eps))
            loss = _mse(encoder, head, noisy_batch, np.concatenate(target_batch))
            if not np.isfinite(loss.item()):
                diverged = True
                break
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(loss.item())
        if diverged:
            break
        vm = valid_mse()
        train_curve.append(float(np.mean(epoch_losses)))
        valid_curve.append(vm)
        if vm < best_valid:
            best_valid = vm
            best_epoch = epoch
            best_arrays = snapshot()
    for k, p in params.items():
        p.data = best_arrays[k].copy()
    return PretrainResult(
        encoder=encoder, head=head, stats=stats,
        train_curve=train_curve, valid_curve=valid_curve,
        best_epoch=best_epoch, best_valid=best_valid,
        best_arrays=best_arrays, diverged=diverged,
    )


def write_loss_curves(path, train_curve, valid_curve):
    with open(path, "w") as fh:
        fh.write("# epoch train_mse valid_mse\n")
        for epoch, (tr, va) in enumerate(zip(train_curve, valid_curve)):
            fh.write(f"{epoch} {tr:.10e} {va:.10e}\n")
