"""Equivariant message-passing encoder over atomic point clouds.

Maps a conformation to per-atom scalar features ``x`` (N, d) and vector
features ``v`` (N, 3, d).  Scalars are invariant under rigid motions of the
input; vectors co-rotate.  The architecture is a distance-gated dot-product
attention stack: each layer mixes scalar channels through edge attention
weighted by a smooth radial cutoff and updates vector channels from scalar
edge filters times unit bond vectors, plus channel-mixed vector terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .errors import ConfigError, DataError, NumericalError

__all__ = [
    "EncoderConfig",
    "NeighborList",
    "build_neighbor_list",
    "cosine_cutoff",
    "erbf",
    "visnet_geometric_scalars",
    "Encoder",
    "featurize_frames",
]


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 64
    n_layers: int = 6
    n_heads: int = 8
    n_rbf: int = 64
    r_cut: float = 5.0
    use_visnet_scalars: bool = False

    def __post_init__(self):
        if self.d % self.n_heads != 0:
            raise ConfigError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.r_cut <= 0:
            raise ConfigError("r_cut must be positive")
        if self.n_rbf < 1:
            raise ConfigError("n_rbf must be >= 1")


@dataclass(frozen=True)
class NeighborList:
    """Directed edge list: every (i, j) with 0 < |r_i - r_j| <= r_cut."""

    edges: np.ndarray        # (E, 2) ordered pairs
    distances: np.ndarray    # (E,)
    units: np.ndarray        # (E, 3) rows (r_i - r_j) / d_ij

    @property
    def n_edges(self):
        return len(self.edges)


def build_neighbor_list(positions, r_cut):
    """All ordered pairs within the cutoff, by direct O(N^2) scan.

    Coincident atoms are a hard error: the unit displacement is undefined
    and downstream kernels would silently produce NaNs.
    """
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] != 3:
        raise DataError("positions must have shape (N, 3)")
    if not np.all(np.isfinite(pos)):
        raise DataError("non-finite coordinates")
    n = len(pos)
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    off_diag = ~np.eye(n, dtype=bool)
    if np.any((dist <= 1e-12) & off_diag):
        i, j = np.argwhere((dist <= 1e-12) & off_diag)[0]
        raise DataError(f"degenerate pair: atoms {i} and {j} coincide")
    mask = off_diag & (dist <= r_cut)
    src, dst = np.nonzero(mask)
    edges = np.stack([src, dst], axis=1)
    d = dist[src, dst]
    units = diff[src, dst] / d[:, None]
    return NeighborList(edges=edges, distances=d, units=units)


def cosine_cutoff(d, r_cut):
    """0.5 (cos(pi d / r_cut) + 1) inside the cutoff, exactly 0 beyond."""
    d = np.asarray(d, dtype=np.float64)
    inside = d <= r_cut
    return np.where(inside, 0.5 * (np.cos(np.pi * np.minimum(d, r_cut) / r_cut) + 1.0), 0.0)


def make_rbf_params(n_rbf, r_cut, dtype=np.float64):
    """Means equally spaced on [exp(-r_cut), 1], shared width.

    beta = (2 (1 - exp(-r_cut)) / K)^-2 so adjacent kernels overlap at
    roughly half height; both arrays are trainable.
    """
    lo = np.exp(-r_cut)
    means = np.linspace(lo, 1.0, n_rbf)
    beta = (2.0 / n_rbf * (1.0 - lo)) ** -2
    betas = np.full(n_rbf, beta)
    return nn.parameter(means.astype(dtype)), nn.parameter(betas.astype(dtype))


def erbf(d, means, betas, r_cut):
    """Exponential radial basis with cosine-cutoff envelope, shape (..., K).

    eRBF_k(d) = phi(d) exp(-beta_k (exp(-d) - mu_k)^2)
    """
    d = np.asarray(d, dtype=np.float64)
    mu = means.data if isinstance(means, ad.Tensor) else np.asarray(means)
    be = betas.data if isinstance(betas, ad.Tensor) else np.asarray(betas)
    env = cosine_cutoff(d, r_cut)
    return env[..., None] * np.exp(-be * (np.exp(-d)[..., None] - mu) ** 2)


def _erbf_graph(d, means, betas, r_cut):
    """Tensor-graph version used inside the encoder (trainable mu, beta)."""
    env = ad.Tensor(cosine_cutoff(d, r_cut)[:, None])
    gap = ad.Tensor(np.exp(-d)[:, None]) - means
    return env * ad.exp(-(betas * gap * gap))


def visnet_geometric_scalars(positions, nbr):
    """Rotation-invariant per-edge dihedral content.

    For edge (i, j): project the summed unit-vector field at i onto the
    plane normal to the bond (rejection w_ij) and return w_ij . w_ji, which
    aggregates cos(phi) over dihedrals straddling the bond.  Also returns
    the intermediate u, v, w fields for inspection and testing.
    """
    pos = np.asarray(positions, dtype=np.float64)
    n = len(pos)
    src = nbr.edges[:, 0]
    dst = nbr.edges[:, 1]
    # u_ij: unit vector along the edge as seen from i
    u = -nbr.units  # points from i to j
    v = np.zeros((n, 3))
    np.add.at(v, src, u)
    v_i = v[src]
    w = v_i - (v_i * u).sum(axis=1, keepdims=True) * u
    # pair each edge with its reverse to form w_ij . w_ji
    order = {}
    for e, (i, j) in enumerate(nbr.edges):
        order[(i, j)] = e
    reverse = np.array([order[(j, i)] for i, j in nbr.edges], dtype=np.intp)
    dihedral = (w * w[reverse]).sum(axis=1)
    return {"u": u, "v": v, "w": w, "dihedral": dihedral}


class AttentionLayer(nn.Module):
    """One message-passing layer: distance-gated attention plus vector update."""

    def __init__(self, d, n_heads, n_rbf, rng, dtype=np.float64):
        self.d = d
        self.n_heads = n_heads
        self.norm = nn.LayerNorm(d, dtype=dtype)
        self.proj_q = nn.Linear(d, d, rng, dtype=dtype)
        self.proj_k = nn.Linear(d, d, rng, dtype=dtype)
        self.proj_v = nn.Linear(d, 3 * d, rng, dtype=dtype)
        self.proj_dk = nn.Linear(n_rbf, d, rng, dtype=dtype)
        self.proj_dv = nn.Linear(n_rbf, 3 * d, rng, dtype=dtype)
        self.proj_out = nn.Linear(d, 3 * d, rng, dtype=dtype)
        self.proj_u1 = nn.Linear(d, d, rng, bias=False, dtype=dtype)
        self.proj_u2 = nn.Linear(d, d, rng, bias=False, dtype=dtype)
        self.proj_u3 = nn.Linear(d, d, rng, bias=False, dtype=dtype)

    def __call__(self, x, v, edges, rbf, cutoff_env, units, n_atoms):
        """Return (dx, dv) given current features and the edge data.

        x: (N, d), v: (N, 3, d); rbf: (E, K) Tensor; cutoff_env: (E,) ndarray;
        units: (E, 3) ndarray with rows (r_i - r_j)/d_ij for edge (i, j).
        """
        d, h = self.d, self.n_heads
        dh = d // h
        src = edges[:, 0]
        dst = edges[:, 1]

        xn = self.norm(x)
        q = ad.take0(self.proj_q(xn), src)                  # (E, d)
        k = ad.take0(self.proj_k(xn), dst)
        dk = ad.silu(self.proj_dk(rbf))                     # (E, d)
        # per-head attention: SiLU(sum_k Q.K.DK) * cutoff
        prod = ad.reshape(q * k * dk, (-1, h, dh))
        attn = ad.silu(ad.tsum(prod, axis=2)) * ad.Tensor(cutoff_env[:, None])  # (E, h)

        values = self.proj_v(xn)                            # (N, 3d)
        dv_filter = ad.silu(self.proj_dv(rbf))              # (E, 3d)
        filtered = ad.take0(values, dst) * dv_filter
        s1, s2, s3 = (
            filtered[:, :d],
            filtered[:, d: 2 * d],
            filtered[:, 2 * d:],
        )

        # attention-weighted scalar aggregation
        weighted = ad.reshape(ad.reshape(s3, (-1, h, dh)) * ad.reshape(attn, (-1, h, 1)), (-1, d))
        pooled = ad.segment_sum(weighted, src, n_atoms)     # (N, d)
        out = self.proj_out(pooled)
        q1, q2, q3 = out[:, :d], out[:, d: 2 * d], out[:, 2 * d:]

        u1v = ad.matmul(v, self.proj_u1.weight)             # (N, 3, d)
        u2v = ad.matmul(v, self.proj_u2.weight)
        u3v = ad.matmul(v, self.proj_u3.weight)
        dot = ad.tsum(u1v * u2v, axis=1)                    # (N, d)
        dx = q1 + q2 * dot

        v_j = ad.take0(v, dst)                              # (E, 3, d)
        edge_vec = ad.reshape(s1, (-1, 1, d)) * v_j + ad.reshape(s2, (-1, 1, d)) * ad.Tensor(
            units[:, :, None]
        )
        dv = ad.reshape(q3, (-1, 1, d)) * u3v + ad.segment_sum(edge_vec, src, n_atoms)
        if not np.all(np.isfinite(dx.data)):
            raise NumericalError("non-finite scalar update in attention layer")
        return dx, dv


class Encoder(nn.Module):
    """Embedding plus a residual stack of attention layers.

    Embedding: x_i = E[z_i] + W_n sum_j W_rbf(eRBF(d_ij)) . E_n[z_j], v_i = 0.
    """

    MAX_Z = 100

    def __init__(self, cfg, seed=0, dtype=np.float64):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.embed = nn.Embedding(self.MAX_Z + 1, cfg.d, rng, dtype=dtype)
        self.embed_nbr = nn.Embedding(self.MAX_Z + 1, cfg.d, rng, dtype=dtype)
        self.proj_rbf = nn.Linear(cfg.n_rbf, cfg.d, rng, dtype=dtype)
        self.proj_nbr = nn.Linear(cfg.d, cfg.d, rng, dtype=dtype)
        self.rbf_means, self.rbf_betas = make_rbf_params(cfg.n_rbf, cfg.r_cut, dtype=dtype)
        if cfg.use_visnet_scalars:
            # per-edge dihedral scalar enters the distance-kernel channel
            self.proj_visnet = nn.Linear(1, cfg.n_rbf, rng, bias=False, dtype=dtype)
        self.layers = [
            AttentionLayer(cfg.d, cfg.n_heads, cfg.n_rbf, rng, dtype=dtype)
            for _ in range(cfg.n_layers)
        ]

    def __call__(self, positions, z, nbr=None):
        """Encode one frame: returns (x, v) Tensors of shape (N, d), (N, 3, d)."""
        z = np.asarray(z)
        if np.any((z < 1) | (z > self.MAX_Z)):
            raise DataError("atomic number outside 1-100")
        cfg = self.cfg
        if nbr is None:
            nbr = build_neighbor_list(positions, cfg.r_cut)
        n = len(z)
        rbf = _erbf_graph(nbr.distances, self.rbf_means, self.rbf_betas, cfg.r_cut)
        if cfg.use_visnet_scalars and nbr.n_edges:
            scal = visnet_geometric_scalars(positions, nbr)["dihedral"]
            rbf = rbf + self.proj_visnet(ad.Tensor(scal[:, None]))
        env = cosine_cutoff(nbr.distances, cfg.r_cut)

        x = self.embed(z)
        if nbr.n_edges:
            nbr_feat = self.proj_rbf(rbf) * ad.take0(self.embed_nbr(z), nbr.edges[:, 1])
            x = x + self.proj_nbr(ad.segment_sum(nbr_feat, nbr.edges[:, 0], n))
        dtype = self.embed.weight.data.dtype
        v = ad.Tensor(np.zeros((n, 3, cfg.d), dtype=dtype))
        for layer in self.layers:
            dx, dv = layer(x, v, nbr.edges, rbf, env, nbr.units, n)
            x = x + dx
            v = v + dv
        return x, v


def encoder_digest(encoder):
    """Stable digest of the encoder parameters and config, for provenance."""
    import hashlib

    h = hashlib.sha256()
    cfg = encoder.cfg
    h.update(
        np.array(
            [cfg.d, cfg.n_layers, cfg.n_heads, cfg.n_rbf, int(cfg.use_visnet_scalars)],
            dtype="<u4",
        ).tobytes()
    )
    h.update(np.float64(cfg.r_cut).tobytes())
    for name, arr in sorted(encoder.state_arrays().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.digest()


def featurize_frames(encoder, frames, z, chunk=64):
    """Inference over many frames; returns float32 (F, N, d) and (F, N, 3, d).

    Frames in a chunk are packed into one disconnected graph (edges never
    cross frame boundaries), which keeps the per-frame Python overhead low.
    """
    frames = np.asarray(frames)
    f_total, n, _ = frames.shape
    cfg = encoder.cfg
    xs = np.empty((f_total, n, cfg.d), dtype=np.float32)
    vs = np.empty((f_total, n, 3, cfg.d), dtype=np.float32)
    with ad.no_grad():
        for start in range(0, f_total, chunk):
            block = frames[start: start + chunk]
            b = len(block)
            offsets = np.arange(b)[:, None] * n
            edge_list = []
            dist_list = []
            unit_list = []
            for fi in range(b):
                nbr = build_neighbor_list(block[fi], cfg.r_cut)
                edge_list.append(nbr.edges + fi * n)
                dist_list.append(nbr.distances)
                unit_list.append(nbr.units)
            packed = NeighborList(
                edges=np.concatenate(edge_list) if edge_list else np.zeros((0, 2), dtype=int),
                distances=np.concatenate(dist_list),
                units=np.concatenate(unit_list),
            )
            zz = np.tile(np.asarray(z), b)
            pos = block.reshape(b * n, 3)
            x, v = encoder(pos, zz, nbr=packed)
            xs[start: start + b] = x.data.reshape(b, n, cfg.d).astype(np.float32)
            vs[start: start + b] = v.data.reshape(b, n, 3, cfg.d).astype(np.float32)
    return xs, vs
