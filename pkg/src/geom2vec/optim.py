"""Optimizers, early stopping, gradient checking, and checkpoint I/O.

Two update rules are provided: AdamW with the AMSGrad maximum on the second
moment, and the epsilon-free atan2 form whose step is invariant to a common
rescaling of first and second moments.  Parameter traversal is in sorted
name order so training runs are bit-reproducible.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, NumericalError

CHECKPOINT_MAGIC = b"G2VCKPT1"

__all__ = [
    "Optimizer",
    "EarlyStop",
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
]


class Optimizer:
    """Adam-family optimizer over a named parameter dict.

    mode "adamw_amsgrad": decoupled weight decay, v_max running maximum,
    update  theta <- theta (1 - lr wd) - lr m_hat / (sqrt(v_hat_max) + eps).
    mode "adam_atan2":    theta <- theta - lr atan2(m_hat, sqrt(v_hat)),
    with no epsilon hyperparameter.
    """

    MODES = ("adamw_amsgrad", "adam_atan2")

    def __init__(self, params, lr, mode="adamw_amsgrad", betas=(0.9, 0.999),
                 eps=1e-8, weight_decay=0.0):
        if mode not in self.MODES:
            raise ConfigError(f"unknown optimizer mode '{mode}'")
        self.params = dict(params)
        self.lr = lr
        self.mode = mode
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.state = {
            name: {
                "m": np.zeros_like(p.data),
                "v": np.zeros_like(p.data),
                "vmax": np.zeros_like(p.data),
            }
            for name, p in self.params.items()
        }

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name in sorted(self.params):
            p = self.params[name]
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient in parameter block '{name}'")
            st = self.state[name]
            st["m"] = self.beta1 * st["m"] + (1.0 - self.beta1) * g
            st["v"] = self.beta2 * st["v"] + (1.0 - self.beta2) * g * g
            m_hat = st["m"] / bc1
            if self.mode == "adamw_amsgrad":
                np.maximum(st["vmax"], st["v"], out=st["vmax"])
                v_hat = st["vmax"] / bc2
                if self.weight_decay:
                    p.data *= 1.0 - self.lr * self.weight_decay
                p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            else:
                v_hat = st["v"] / bc2
                p.data -= self.lr * np.arctan2(m_hat, np.sqrt(v_hat))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


@dataclass
class EarlyStop:
    """Strict-improvement early stopping on a train and a validation metric.

    Both metrics are higher-is-better.  Training stops when the train metric
    has not improved for ``train_patience`` consecutive batches, or the
    validation metric has not improved for ``valid_patience`` consecutive
    validation events.
    """

    train_patience: int = 500
    valid_patience: int = 10
    valid_interval: int = 10
    best_train: float = field(default=-np.inf)
    best_valid: float = field(default=-np.inf)
    train_stall: int = 0
    valid_stall: int = 0

    def __post_init__(self):
        if self.train_patience < 1 or self.valid_patience < 1:
            raise ConfigError("patiences must be >= 1")

    def update(self, train_metric=None, valid_metric=None):
        """Register metrics; returns True when training should stop."""
        if train_metric is not None:
            if not np.isfinite(train_metric):
                raise NumericalError("non-finite training metric")
            if train_metric > self.best_train:
                self.best_train = float(train_metric)
                self.train_stall = 0
            else:
                self.train_stall += 1
        if valid_metric is not None:
            if not np.isfinite(valid_metric):
                raise NumericalError("non-finite validation metric")
            if valid_metric > self.best_valid:
                self.best_valid = float(valid_metric)
                self.valid_stall = 0
            else:
                self.valid_stall += 1
        return self.train_stall >= self.train_patience or self.valid_stall >= self.valid_patience


def grad_check(loss_fn, params, n_samples=200, step=1e-5, seed=0):
    """Max relative error of reverse-mode gradients vs central differences.

    ``loss_fn`` must rebuild the graph and return a scalar Tensor each call;
    ``params`` is a name->Tensor dict.  Up to ``n_samples`` scalar
    coordinates are probed, drawn uniformly over all parameters.
    """
    loss = loss_fn()
    for p in params.values():
        p.grad = None
    loss.backward()
    grads = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
             for name, p in params.items()}
    names = sorted(params)
    sizes = np.array([params[n].data.size for n in names])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    count = min(n_samples, total)
    flat_choices = rng.choice(total, size=count, replace=False)
    offsets = np.cumsum(sizes)
    worst = 0.0
    for flat in flat_choices:
        block = int(np.searchsorted(offsets, flat, side="right"))
        name = names[block]
        local = int(flat - (offsets[block] - sizes[block]))
        idx = np.unravel_index(local, params[name].data.shape)
        p = params[name]
        orig = p.data[idx]
        p.data[idx] = orig + step
        up = loss_fn().item()
        p.data[idx] = orig - step
        down = loss_fn().item()
        p.data[idx] = orig
        fd = (up - down) / (2.0 * step)
        g = grads[name][idx]
        rel = abs(g - fd) / max(abs(g), abs(fd), 1e-6)
        worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _pack_config(cfg):
    return struct.pack(
        "<4I", cfg.d, cfg.n_layers, cfg.n_heads, cfg.n_rbf
    ) + struct.pack("<d", cfg.r_cut) + struct.pack("<I", int(cfg.use_visnet_scalars))


def save_checkpoint(path, cfg, arrays, step=None, metric=None):
    """Write a named-parameter checkpoint.

    Layout: magic, encoder config block, then per array (name length, name,
    rank, dims, float32 payload), then a sha256 digest of everything before
    it.  ``step`` and ``metric`` ride along as reserved parameter blocks.
    """
    payload = dict(arrays)
    if step is not None:
        payload["__step__"] = np.array([step], dtype=np.float32)
    if metric is not None:
        payload["__metric__"] = np.array([metric], dtype=np.float32)
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += _pack_config(cfg)
    for name in sorted(payload):
        arr = np.ascontiguousarray(payload[name], dtype="<f4")
        encoded = name.encode()
        buf += struct.pack("<I", len(encoded))
        buf += encoded
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
        buf += arr.tobytes()
    buf += hashlib.sha256(bytes(buf)).digest()
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


def load_checkpoint(path, expected_cfg=None):
    """Read a checkpoint; returns (EncoderConfig, arrays, info).

    Verifies the trailing digest and, when ``expected_cfg`` is given, that
    the stored config matches it.
    """
    from .encoder import EncoderConfig

    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: checkpoint magic mismatch")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise DataError(f"{path}: checkpoint digest mismatch")
    off = len(CHECKPOINT_MAGIC)
    d, n_layers, n_heads, n_rbf = struct.unpack_from("<4I", body, off)
    off += 16
    (r_cut,) = struct.unpack_from("<d", body, off)
    off += 8
    (use_visnet,) = struct.unpack_from("<I", body, off)
    off += 4
    cfg = EncoderConfig(
        d=d, n_layers=n_layers, n_heads=n_heads, n_rbf=n_rbf, r_cut=r_cut,
        use_visnet_scalars=bool(use_visnet),
    )
    arrays = {}
    while off < len(body):
        (name_len,) = struct.unpack_from("<I", body, off)
        off += 4
        name = body[off: off + name_len].decode()
        off += name_len
        (rank,) = struct.unpack_from("<I", body, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", body, off) if rank else ()
        off += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        arrays[name] = np.frombuffer(body, dtype="<f4", count=count, offset=off).reshape(shape).copy()
        off += 4 * count
    info = {}
    if "__step__" in arrays:
        info["step"] = float(arrays.pop("__step__")[0])
    if "__metric__" in arrays:
        info["metric"] = float(arrays.pop("__metric__")[0])
    if expected_cfg is not None and cfg != expected_cfg:
        raise ConfigError(f"{path}: config incompatibility (stored {cfg}, expected {expected_cfg})")
    return cfg, arrays, info
