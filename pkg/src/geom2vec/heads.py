"""Task heads over coarse-grained tokens.

Per-atom encoder features are pooled into per-token scalar/vector blocks,
then combined by one of five strategies: plain pooling through a gated
equivariant block, a transformer over tokens (SubFormer), an MLP-mixer over
tokens (SubMixer), or either mixer fed by stacked geometric vector
perceptrons (subgvp variants).  All scalar outputs are invariant to rigid
motions because vector channels are only ever consumed through norms and
gates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .dataset import ca_pair_distances
from .errors import ConfigError, DataError

__all__ = [
    "HeadConfig",
    "pool_tokens",
    "pool_global",
    "GatedEquivariantBlock",
    "GeometricVectorPerceptron",
    "GlobalTokenEmbed",
    "SubFormer",
    "SubMixer",
    "Geom2vecHead",
    "geom2vec_head_forward",
    "extract_attention_maps",
    "write_attention_maps",
]

MIXERS = ("none", "subformer", "submixer", "subgvp+subformer", "subgvp+submixer")


@dataclass(frozen=True)
class HeadConfig:
    mixer: str = "none"
    d: int = 64
    d_o: int = 2
    n_mixer_layers: int = 3
    n_gvp_layers: int = 3
    expansion_factor: int = 2
    use_global_token: bool = False
    n_heads: int = 4
    mlp_hidden: int = 64
    dropout: float = 0.2

    def __post_init__(self):
        if self.mixer not in MIXERS:
            raise ConfigError(f"unknown mixer '{self.mixer}' (one of {MIXERS})")
        if self.d_o < 1:
            raise ConfigError("d_o must be >= 1")
        if self.expansion_factor < 1:
            raise ConfigError("expansion_factor must be >= 1")
        if self.use_global_token and self.mixer == "none":
            raise ConfigError("a global token requires a token mixer")

    @property
    def uses_gvp(self):
        return self.mixer.startswith("subgvp")


def _as_tensor(x):
    return x if isinstance(x, ad.Tensor) else ad.Tensor(np.asarray(x))


def pool_tokens(x, v, partition):
    """Sum atom features into per-token blocks: (N,d),(N,3,d) -> (M,d),(M,3,d)."""
    atom_idx, token_idx = partition.token_of_atom()
    m = partition.n_tokens
    xs = ad.segment_sum(ad.take0(_as_tensor(x), atom_idx), token_idx, m)
    vs = ad.segment_sum(ad.take0(_as_tensor(v), atom_idx), token_idx, m)
    return xs, vs


def pool_global(xs, vs):
    """Sum over the token axis; works on (..., M, d) and (..., M, 3, d)."""
    xs, vs = _as_tensor(xs), _as_tensor(vs)
    return ad.tsum(xs, axis=-2), ad.tsum(vs, axis=-3)


class GatedEquivariantBlock(nn.Module):
    """Scalar/vector mixing through norms and multiplicative gates.

    v1 = ||W_a v|| (d_i norms), v2 = W_b v (3, d_o); the scalar MLP maps
    concat(x, v1) to 2 d_o values split into new scalars and a gate for v2.
    """

    def __init__(self, d_in, d_out, rng, dtype=np.float64, zero_init_vector=False):
        self.proj_norm = nn.Linear(d_in, d_in, rng, bias=False, dtype=dtype)
        self.proj_vec = nn.Linear(d_in, d_out, rng, bias=False, dtype=dtype, zero_init=zero_init_vector)
        self.fc1 = nn.Linear(2 * d_in, d_in, rng, dtype=dtype)
        self.fc2 = nn.Linear(d_in, 2 * d_out, rng, dtype=dtype)
        self.d_out = d_out

    def __call__(self, x, v):
        x, v = _as_tensor(x), _as_tensor(v)
        norms = ad.vector_norm(ad.matmul(v, self.proj_norm.weight), axis=-2)
        v2 = ad.matmul(v, self.proj_vec.weight)
        h = self.fc2(ad.silu(self.fc1(ad.concat([x, norms], axis=-1))))
        x_new = h[..., : self.d_out]
        gate = h[..., self.d_out:]
        x_out = ad.silu(x_new)
        v_out = ad.reshape(gate, gate.shape[:-1] + (1, self.d_out)) * v2
        return x_out, v_out


class GeometricVectorPerceptron(nn.Module):
    """Vector-norm driven scalar update with a norm-gated vector output."""

    def __init__(self, d_in, d_out, rng, d_hidden=None, dtype=np.float64):
        d_h = d_hidden if d_hidden is not None else max(d_in, d_out)
        self.proj_h = nn.Linear(d_in, d_h, rng, bias=False, dtype=dtype)
        self.proj_o = nn.Linear(d_h, d_out, rng, bias=False, dtype=dtype)
        self.fc = nn.Linear(d_h + d_in, d_out, rng, dtype=dtype)

    def __call__(self, x, v):
        x, v = _as_tensor(x), _as_tensor(v)
        v_h = ad.matmul(v, self.proj_h.weight)
        x_h = ad.vector_norm(v_h, axis=-2)
        x_out = ad.silu(self.fc(ad.concat([x_h, x], axis=-1)))
        v_o = ad.matmul(v_h, self.proj_o.weight)
        gate = ad.sigmoid(ad.vector_norm(v_o, axis=-2))
        v_out = ad.reshape(gate, gate.shape[:-1] + (1,) + gate.shape[-1:]) * v_o
        return x_out, v_out


class GlobalTokenEmbed(nn.Module):
    """Two-layer SiLU perceptron from pairwise-distance features to R^d."""

    def __init__(self, n_inputs, d, rng, dtype=np.float64):
        self.fc1 = nn.Linear(n_inputs, d, rng, dtype=dtype)
        self.fc2 = nn.Linear(d, d, rng, dtype=dtype)

    def __call__(self, features):
        return self.fc2(ad.silu(self.fc1(_as_tensor(features))))


class MultiHeadAttention(nn.Module):
    def __init__(self, d, n_heads, rng, dtype=np.float64):
        if d % n_heads != 0:
            raise ConfigError(f"d={d} not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.proj_qkv = nn.Linear(d, 3 * d, rng, dtype=dtype)
        self.proj_out = nn.Linear(d, d, rng, dtype=dtype)

    def __call__(self, x):
        """x: (..., M, d) -> (..., M, d) plus the head-averaged attention map."""
        d = x.shape[-1]
        h = self.n_heads
        dh = d // h
        m = x.shape[-2]
        lead = x.shape[:-2]
        qkv = self.proj_qkv(x)
        qkv = ad.reshape(qkv, lead + (m, 3, h, dh))
        qkv = ad.swapaxes(qkv, -3, -2)          # (..., M, h, 3, dh)
        qkv = ad.swapaxes(qkv, -4, -3)          # (..., h, M, 3, dh)
        q = qkv[..., 0, :]
        k = qkv[..., 1, :]
        v = qkv[..., 2, :]
        scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
        weights = ad.softmax(scores, axis=-1)   # (..., h, M, M)
        mixed = ad.matmul(weights, v)           # (..., h, M, dh)
        mixed = ad.swapaxes(mixed, -3, -2)      # (..., M, h, dh)
        out = self.proj_out(ad.reshape(mixed, lead + (m, d)))
        head_avg = weights.data.mean(axis=-3)   # (..., M, M)
        return out, head_avg


class SubFormer(nn.Module):
    """Pre-normalization transformer encoder over token rows (scalars only)."""

    def __init__(self, d, n_layers, n_heads, expansion_factor, rng, dropout=0.0, dtype=np.float64):
        self.attn = [MultiHeadAttention(d, n_heads, rng, dtype=dtype) for _ in range(n_layers)]
        self.norm1 = [nn.LayerNorm(d, dtype=dtype) for _ in range(n_layers)]
        self.norm2 = [nn.LayerNorm(d, dtype=dtype) for _ in range(n_layers)]
        self.ff1 = [nn.Linear(d, expansion_factor * d, rng, dtype=dtype) for _ in range(n_layers)]
        self.ff2 = [nn.Linear(expansion_factor * d, d, rng, dtype=dtype) for _ in range(n_layers)]
        self.drop = nn.Dropout(dropout)

    def __call__(self, tokens, has_global=False, rng=None, collect_attention=False):
        """tokens: (..., M', d) where the global row, if any, is last.

        Returns the pooled scalar output (global row when present, else the
        token mean) and, when requested, the per-layer head-averaged maps.
        """
        x = _as_tensor(tokens)
        maps = []
        for attn, ln1, ln2, ff1, ff2 in zip(self.attn, self.norm1, self.norm2, self.ff1, self.ff2):
            a, head_avg = attn(ln1(x))
            if collect_attention:
                maps.append(head_avg)
            x = x + a
            x = x + ff2(self.drop(ad.silu(ff1(ln2(x))), rng))
        if has_global:
            out = x[..., -1, :]
        else:
            out = ad.tmean(x, axis=-2)
        if collect_attention:
            return out, maps
        return out


class SubMixer(nn.Module):
    """MLP-mixer over tokens; mixing weights are shape-bound to the token count."""

    def __init__(self, n_tokens, d, n_layers, expansion_factor, rng, dropout=0.0, dtype=np.float64):
        self.n_tokens = n_tokens
        e = expansion_factor
        self.norm1 = [nn.LayerNorm(d, dtype=dtype) for _ in range(n_layers)]
        self.norm2 = [nn.LayerNorm(d, dtype=dtype) for _ in range(n_layers)]
        self.tok1 = [nn.Linear(n_tokens, e * n_tokens, rng, dtype=dtype) for _ in range(n_layers)]
        self.tok2 = [nn.Linear(e * n_tokens, n_tokens, rng, dtype=dtype) for _ in range(n_layers)]
        self.ch1 = [nn.Linear(d, e * d, rng, dtype=dtype) for _ in range(n_layers)]
        self.ch2 = [nn.Linear(e * d, d, rng, dtype=dtype) for _ in range(n_layers)]
        self.drop = nn.Dropout(dropout)

    def __call__(self, tokens, rng=None):
        x = _as_tensor(tokens)
        if x.shape[-2] != self.n_tokens:
            raise DataError(
                f"token count bound: mixer built for {self.n_tokens} tokens, got {x.shape[-2]}"
            )
        for ln1, ln2, t1, t2, c1, c2 in zip(self.norm1, self.norm2, self.tok1, self.tok2, self.ch1, self.ch2):
            y = ad.swapaxes(ln1(x), -1, -2)          # (..., d, M)
            y = t2(self.drop(ad.silu(t1(y)), rng))
            x = x + ad.swapaxes(y, -1, -2)
            x = x + c2(self.drop(ad.silu(c1(ln2(x))), rng))
        return ad.tmean(x, axis=-2)


class Geom2vecHead(nn.Module):
    """Dispatch from token features to a d_o-dimensional scalar output.

    mixer=none:      pool tokens globally -> GEB -> MLP
    subformer/-mixer: GEB per token (+learned token bias for the transformer)
                      -> mixer(+global token) -> MLP
    subgvp+*:        stacked GVPs per token -> mixer(+global token) -> MLP
    """

    def __init__(self, cfg, n_tokens, n_global_inputs=None, seed=0, dtype=np.float64):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.n_tokens = n_tokens
        d = cfg.d
        if cfg.use_global_token:
            if n_global_inputs is None:
                raise ConfigError("use_global_token requires n_global_inputs")
            self.global_embed = GlobalTokenEmbed(n_global_inputs, d, rng, dtype=dtype)
        n_rows = n_tokens + (1 if cfg.use_global_token else 0)
        if cfg.uses_gvp:
            self.gvp = [
                GeometricVectorPerceptron(d, d, rng, dtype=dtype) for _ in range(cfg.n_gvp_layers)
            ]
        else:
            self.geb = GatedEquivariantBlock(d, d, rng, dtype=dtype)
            if cfg.mixer == "subformer":
                # learned per-token bias stands in for positional encodings
                self.token_bias = nn.parameter(np.zeros((n_tokens, d), dtype=dtype))
        if cfg.mixer.endswith("subformer"):
            self.mixer = SubFormer(
                d, cfg.n_mixer_layers, cfg.n_heads, cfg.expansion_factor, rng,
                dropout=cfg.dropout, dtype=dtype,
            )
        elif cfg.mixer.endswith("submixer"):
            self.mixer = SubMixer(
                n_rows, d, cfg.n_mixer_layers, cfg.expansion_factor, rng,
                dropout=cfg.dropout, dtype=dtype,
            )
        self.mlp = nn.MLP([d, cfg.mlp_hidden, cfg.mlp_hidden, cfg.d_o], rng,
                          dtype=dtype, dropout=cfg.dropout)

    def forward_tokens(self, xs, vs, global_features=None, rng=None, collect_attention=False):
        """Token blocks (..., M, d) and (..., M, 3, d) to outputs (..., d_o)."""
        cfg = self.cfg
        xs, vs = _as_tensor(xs), _as_tensor(vs)
        maps = None
        if cfg.mixer == "none":
            gx, gv = pool_global(xs, vs)
            h, _ = self.geb(gx, gv)
        else:
            if cfg.uses_gvp:
                h, hv = xs, vs
                for layer in self.gvp:
                    h, hv = layer(h, hv)
            else:
                h, _ = self.geb(xs, vs)
                if cfg.mixer == "subformer":
                    h = h + self.token_bias
            if cfg.use_global_token:
                if global_features is None:
                    raise ConfigError("head was built with a global token; pass global_features")
                g = self.global_embed(global_features)
                g = ad.reshape(g, g.shape[:-1] + (1,) + g.shape[-1:])
                h = ad.concat([h, g], axis=-2)
            if isinstance(self.mixer, SubFormer):
                if collect_attention:
                    h, maps = self.mixer(h, has_global=cfg.use_global_token, rng=rng,
                                         collect_attention=True)
                else:
                    h = self.mixer(h, has_global=cfg.use_global_token, rng=rng)
            else:
                if collect_attention:
                    raise ConfigError("mixer lacks attention maps")
                h = self.mixer(h, rng=rng)
        out = self.mlp(h, rng=rng)
        if collect_attention:
            return out, (maps if maps is not None else [])
        return out


def geom2vec_head_forward(head, x_atoms, v_atoms, partition, frame=None, top=None, rng=None):
    """Full per-frame path: pool atoms into tokens and run the head."""
    xs, vs = pool_tokens(x_atoms, v_atoms, partition)
    g = None
    if head.cfg.use_global_token:
        if frame is None or top is None:
            raise ConfigError("global token requires the frame and topology")
        g = ca_pair_distances(frame, top)
    return head.forward_tokens(xs, vs, global_features=g, rng=rng)


def extract_attention_maps(head, scalar_tokens, vector_tokens, global_features=None):
    """Per-layer head-averaged attention maps, averaged over the given frames.

    ``scalar_tokens``/``vector_tokens`` are stacked frames (F, M, d) and
    (F, M, 3, d); returns a list of (M', M') arrays, one per mixer layer.
    """
    if not isinstance(getattr(head, "mixer", None), SubFormer):
        raise ConfigError("mixer lacks attention maps")
    with ad.no_grad():
        _, maps = head.forward_tokens(
            scalar_tokens, vector_tokens, global_features=global_features,
            collect_attention=True,
        )
    out = []
    for m in maps:
        m = np.asarray(m)
        out.append(m.mean(axis=0) if m.ndim == 3 else m)
    return out


_THREE_TO_ONE = {
    "ALA": "A", "ARG": "R", "ASN": "N", "ASP": "D", "CYS": "C", "GLN": "Q",
    "GLU": "E", "GLY": "G", "HIS": "H", "ILE": "I", "LEU": "L", "LYS": "K",
    "MET": "M", "PHE": "F", "PRO": "P", "SER": "S", "THR": "T", "TRP": "W",
    "TYR": "Y", "VAL": "V", "NLE": "n",
}


def token_letters(top, with_global):
    letters = [_THREE_TO_ONE.get(name.upper(), "X") for name in top.residue_names]
    if with_global:
        letters.append("*")
    return letters


def write_attention_maps(maps, letters, path_prefix):
    """One text matrix per layer with a header row naming the tokens."""
    paths = []
    for layer, m in enumerate(maps):
        path = f"{path_prefix}.layer{layer}.txt"
        with open(path, "w") as fh:
            fh.write("# tokens: " + " ".join(letters) + "\n")
            for row in np.asarray(m):
                fh.write(" ".join(f"{val:.8e}" for val in row) + "\n")
        paths.append(path)
    return paths
