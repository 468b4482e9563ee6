"""Trajectory and topology I/O, atom selection, splits, and lagged-pair sampling.

File formats are deliberately plain text plus one small binary container:

* extended XYZ: per frame ``N`` / comment / ``element x y z`` lines, Angstrom;
* topology sidecar: header ``N R`` then one ``z name residue_index resname``
  line per atom;
* feature archive: ``G2V1`` magic, little-endian u32 header, three 32-byte
  digests, float32 payloads.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

ARCHIVE_MAGIC = b"G2V1"
ARCHIVE_VERSION = 1

_SYMBOLS = (
    "X H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni Cu Zn "
    "Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe Cs Ba La Ce "
    "Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt Au Hg Tl Pb Bi Po At Rn "
    "Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm"
).split()
_Z_BY_SYMBOL = {s: z for z, s in enumerate(_SYMBOLS)}


def element_symbol(z):
    return _SYMBOLS[int(z)]


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Topology:
    """Per-atom identities and the residue structure they belong to."""

    elements: np.ndarray          # (N,) atomic numbers, 1..100
    residue_index: np.ndarray     # (N,) non-decreasing, covering [0, R)
    residue_names: tuple          # (R,) 3-letter codes
    atom_names: tuple             # (N,) short strings

    def __post_init__(self):
        n = len(self.elements)
        if not (len(self.residue_index) == n == len(self.atom_names)):
            raise DataError("topology per-atom sequences must have equal length")
        z = np.asarray(self.elements)
        if np.any((z < 1) | (z > 100)):
            raise DataError("atomic number outside 1-100")
        ri = np.asarray(self.residue_index)
        if np.any(np.diff(ri) < 0):
            raise DataError("decreasing residue index")
        r = len(self.residue_names)
        present = np.unique(ri)
        if not np.array_equal(present, np.arange(r)):
            raise DataError("gap in residue indices")

    @property
    def n_atoms(self):
        return len(self.elements)

    @property
    def n_residues(self):
        return len(self.residue_names)


@dataclass(frozen=True)
class Trajectory:
    frames: np.ndarray            # (F, N, 3) Angstrom
    frame_interval: float         # ns between saved frames

    def __post_init__(self):
        if self.frames.ndim != 3 or self.frames.shape[2] != 3 or self.frames.shape[0] < 1:
            raise DataError("trajectory frames must have shape (F, N, 3) with F >= 1")
        if not np.all(np.isfinite(self.frames)):
            raise DataError("non-finite coordinate in trajectory")
        if self.frame_interval <= 0:
            raise DataError("frame_interval must be positive")

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def n_atoms(self):
        return self.frames.shape[1]


@dataclass(frozen=True)
class AtomSelection:
    indices: np.ndarray           # strictly increasing atom indices

    def __post_init__(self):
        idx = np.asarray(self.indices)
        if idx.size == 0:
            raise DataError("empty atom selection")
        if np.any(np.diff(idx) <= 0):
            raise DataError("selection indices must be strictly increasing")

    def __len__(self):
        return len(self.indices)


@dataclass(frozen=True)
class CoarseGrainPartition:
    """Disjoint index subsets covering a selection, one per token."""

    subsets: tuple                # tuple of int arrays into the selection's atoms

    def __post_init__(self):
        seen = set()
        for s in self.subsets:
            if len(s) == 0:
                raise DataError("empty partition subset")
            for i in np.asarray(s).tolist():
                if i in seen:
                    raise DataError("partition subsets overlap")
                seen.add(i)

    @property
    def n_tokens(self):
        return len(self.subsets)

    def token_of_atom(self):
        """Flat (selected-atom index -> token id) arrays for scatter pooling."""
        atom_idx = np.concatenate([np.asarray(s, dtype=np.intp) for s in self.subsets])
        token_idx = np.concatenate(
            [np.full(len(s), m, dtype=np.intp) for m, s in enumerate(self.subsets)]
        )
        return atom_idx, token_idx


@dataclass(frozen=True)
class SplitSpec:
    train_frames: np.ndarray
    valid_frames: np.ndarray
    n_segments: int
    train_fraction: float
    # contiguous (start, stop) runs; lagged pairs may not cross their borders
    train_runs: tuple = field(default=())
    valid_runs: tuple = field(default=())


@dataclass(frozen=True)
class LaggedPairBatch:
    pairs: np.ndarray             # (B, 2) frame indices (t, t + lag)
    lag_frames: int


@dataclass(frozen=True)
class FeatureArchive:
    scalar: np.ndarray            # (F, M, d) float32
    vector: np.ndarray | None     # (F, M, 3, d) float32 or None
    encoder_digest: bytes
    selection_digest: bytes
    partition_digest: bytes

    def __post_init__(self):
        f, m, d = self.scalar.shape
        if self.vector is not None and self.vector.shape != (f, m, 3, d):
            raise DataError("vector block shape inconsistent with scalar block")
        for dig in (self.encoder_digest, self.selection_digest, self.partition_digest):
            if len(dig) != 32:
                raise DataError("archive digests must be 32 bytes")


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def _parse_element(token):
    if token in _Z_BY_SYMBOL:
        return _Z_BY_SYMBOL[token]
    try:
        return int(token)
    except ValueError:
        raise DataError(f"unknown element '{token}'") from None


def load_xyz_trajectory(path, frame_interval):
    """Parse an extended-XYZ file into a :class:`Trajectory`."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    frames = []
    n_atoms = None
    pos = 0
    while pos < len(lines):
        if lines[pos].strip() == "" and pos == len(lines) - 1:
            break
        try:
            count = int(lines[pos].strip())
        except ValueError:
            raise DataError(f"{path}: expected atom count at line {pos + 1}") from None
        if n_atoms is None:
            n_atoms = count
        elif count != n_atoms:
            raise DataError(f"{path}: inconsistent atom count at frame {len(frames)}")
        if pos + 1 + count >= len(lines) + 1 and pos + 2 + count > len(lines):
            raise DataError(f"{path}: truncated final frame")
        body = lines[pos + 2: pos + 2 + count]
        if len(body) < count:
            raise DataError(f"{path}: truncated final frame")
        coords = np.empty((count, 3))
        for i, line in enumerate(body):
            parts = line.split()
            if len(parts) < 4:
                raise DataError(f"{path}: malformed coordinate line {pos + 3 + i}")
            try:
                coords[i] = [float(parts[1]), float(parts[2]), float(parts[3])]
            except ValueError:
                raise DataError(f"{path}: non-numeric coordinate at line {pos + 3 + i}") from None
        frames.append(coords)
        pos += 2 + count
    if not frames:
        raise DataError(f"{path}: no frames found")
    return Trajectory(np.stack(frames), frame_interval)


def write_xyz_trajectory(traj, top, path, comment="frame"):
    with open(path, "w") as fh:
        for f in range(traj.n_frames):
            fh.write(f"{traj.n_atoms}\n{comment} {f}\n")
            for i in range(traj.n_atoms):
                x, y, z = traj.frames[f, i]
                fh.write(f"{element_symbol(top.elements[i])} {x:.8f} {y:.8f} {z:.8f}\n")


def load_topology(path):
    """Parse the topology sidecar (header ``N R`` then one line per atom)."""
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    try:
        n, r = (int(tok) for tok in lines[0].split())
    except (ValueError, IndexError):
        raise DataError(f"{path}: malformed topology header") from None
    if len(lines) - 1 < n:
        raise DataError(f"{path}: expected {n} atom lines, found {len(lines) - 1}")
    elements = np.empty(n, dtype=np.int64)
    residue_index = np.empty(n, dtype=np.int64)
    atom_names = []
    res_names = {}
    for i, line in enumerate(lines[1: 1 + n]):
        parts = line.split()
        if len(parts) != 4:
            raise DataError(f"{path}: malformed atom line {i + 2}")
        elements[i] = _parse_element(parts[0])
        atom_names.append(parts[1])
        residue_index[i] = int(parts[2])
        res_names[int(parts[2])] = parts[3]
    residue_names = tuple(res_names.get(j, "UNK") for j in range(r))
    return Topology(elements, residue_index, residue_names, tuple(atom_names))


def write_topology(top, path):
    with open(path, "w") as fh:
        fh.write(f"{top.n_atoms} {top.n_residues}\n")
        for i in range(top.n_atoms):
            ri = int(top.residue_index[i])
            fh.write(f"{int(top.elements[i])} {top.atom_names[i]} {ri} {top.residue_names[ri]}\n")


# ---------------------------------------------------------------------------
# selection and coarse-graining
# ---------------------------------------------------------------------------


def select_heavy_atoms(top):
    """All non-hydrogen atoms, in ascending index order."""
    idx = np.flatnonzero(np.asarray(top.elements) != 1)
    if idx.size == 0:
        raise DataError("selection is empty: topology contains only hydrogens")
    return AtomSelection(idx)


def partition_by_residue(top, sel):
    """Group the selected atoms by residue; tokens keep residue order.

    Subset entries index into the *selection* (0..len(sel)-1), which is the
    layout of featurized atom arrays downstream.
    """
    res_of = np.asarray(top.residue_index)[sel.indices]
    subsets = []
    for r in range(top.n_residues):
        members = np.flatnonzero(res_of == r)
        if members.size:
            subsets.append(members.astype(np.intp))
    return CoarseGrainPartition(tuple(subsets))


# ---------------------------------------------------------------------------
# splits and lagged pairs
# ---------------------------------------------------------------------------


def make_split(n_frames, train_fraction, n_segments, seed):
    """Time-ordered split: train pool is the first half, validation the rest.

    The first half is cut into ``n_segments`` contiguous segments of (near)
    equal length and ``ceil(train_fraction * n_segments)`` of them are drawn
    uniformly without replacement.
    """
    if not (0.0 < train_fraction <= 1.0):
        raise ConfigError("train_fraction must lie in (0, 1]")
    if n_segments < 1:
        raise ConfigError("n_segments must be positive")
    if n_frames < 2 * n_segments:
        raise DataError(f"F={n_frames} too small for {n_segments} segments")
    half = n_frames // 2
    segments = np.array_split(np.arange(half), n_segments)
    n_chosen = int(np.ceil(train_fraction * n_segments))
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(n_segments, size=n_chosen, replace=False))
    train_runs = tuple((int(segments[c][0]), int(segments[c][-1]) + 1) for c in chosen)
    train_frames = np.concatenate([segments[c] for c in chosen])
    valid_frames = np.arange(half, n_frames)
    return SplitSpec(
        train_frames=train_frames,
        valid_frames=valid_frames,
        n_segments=n_segments,
        train_fraction=train_fraction,
        train_runs=train_runs,
        valid_runs=((half, n_frames),),
    )


def admissible_starts(split, lag_frames, partition="train"):
    """Start frames t such that (t, t+lag) stays inside one contiguous run."""
    runs = split.train_runs if partition == "train" else split.valid_runs
    starts = [np.arange(s, e - lag_frames) for s, e in runs if e - s > lag_frames]
    if not starts:
        raise DataError(f"no admissible pair: lag {lag_frames} exceeds every contiguous run")
    return np.concatenate(starts)


def sample_lagged_pairs(split, lag_frames, batch_size, seed, partition="train"):
    """Draw ``batch_size`` (t, t+lag) pairs uniformly with replacement."""
    if lag_frames < 1:
        raise ConfigError("lag_frames must be positive")
    starts = admissible_starts(split, lag_frames, partition)
    rng = np.random.default_rng(seed)
    t = starts[rng.integers(0, len(starts), size=batch_size)]
    pairs = np.stack([t, t + lag_frames], axis=1)
    return LaggedPairBatch(pairs=pairs, lag_frames=lag_frames)


def lag_to_frames(lag_ns, frame_interval, stride=1):
    """Convert a lag in ns to a frame count; rejects non-integral lags."""
    per_frame = frame_interval * stride
    ratio = lag_ns / per_frame
    lag = round(ratio)
    if abs(ratio - lag) > 1e-9 or lag < 1:
        raise ConfigError(
            f"non-integral lag in frames: {lag_ns} ns at {per_frame} ns per (strided) frame"
        )
    return int(lag)


# ---------------------------------------------------------------------------
# distance features
# ---------------------------------------------------------------------------


def ca_atom_indices(top):
    return np.array([i for i, name in enumerate(top.atom_names) if name == "CA"], dtype=np.intp)


def ca_pair_distances(frame, top):
    """Pairwise Calpha distances, lexicographic (i, j) order with i < j."""
    ca = ca_atom_indices(top)
    if len(ca) < 2:
        raise DataError("fewer than 2 CA atoms in topology")
    pos = np.asarray(frame)[ca]
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    iu = np.triu_indices(len(ca), k=1)
    return dist[iu]


# ---------------------------------------------------------------------------
# feature archive container
# ---------------------------------------------------------------------------


def digest_bytes(payload):
    return hashlib.sha256(payload).digest()


def selection_digest(sel):
    return digest_bytes(np.asarray(sel.indices, dtype="<i8").tobytes())


def partition_digest(part):
    chunks = [np.asarray(s, dtype="<i8").tobytes() for s in part.subsets]
    sizes = np.array([len(s) for s in part.subsets], dtype="<i8").tobytes()
    return digest_bytes(sizes + b"".join(chunks))


def write_archive(archive, path):
    f, m, d = archive.scalar.shape
    has_vector = 1 if archive.vector is not None else 0
    with open(path, "wb") as fh:
        fh.write(ARCHIVE_MAGIC)
        fh.write(struct.pack("<5I", ARCHIVE_VERSION, f, m, d, has_vector))
        fh.write(archive.encoder_digest)
        fh.write(archive.selection_digest)
        fh.write(archive.partition_digest)
        fh.write(np.ascontiguousarray(archive.scalar, dtype="<f4").tobytes())
        if archive.vector is not None:
            fh.write(np.ascontiguousarray(archive.vector, dtype="<f4").tobytes())


def read_archive(path, expected_encoder_digest=None):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != ARCHIVE_MAGIC:
        raise DataError(f"{path}: archive magic mismatch")
    version, f, m, d, has_vector = struct.unpack_from("<5I", blob, 4)
    if version != ARCHIVE_VERSION:
        raise DataError(f"{path}: unsupported archive version {version}")
    off = 4 + 20
    enc_dig = blob[off: off + 32]
    sel_dig = blob[off + 32: off + 64]
    part_dig = blob[off + 64: off + 96]
    off += 96
    scalar_bytes = f * m * d * 4
    vector_bytes = f * m * 3 * d * 4 if has_vector else 0
    if len(blob) != off + scalar_bytes + vector_bytes:
        raise DataError(f"{path}: payload size mismatch")
    scalar = np.frombuffer(blob, dtype="<f4", count=f * m * d, offset=off).reshape(f, m, d)
    vector = None
    if has_vector:
        vector = np.frombuffer(
            blob, dtype="<f4", count=f * m * 3 * d, offset=off + scalar_bytes
        ).reshape(f, m, 3, d)
    if expected_encoder_digest is not None and enc_dig != expected_encoder_digest:
        raise DataError(f"{path}: encoder digest mismatch")
    return FeatureArchive(
        scalar=scalar.copy(),
        vector=vector.copy() if vector is not None else None,
        encoder_digest=enc_dig,
        selection_digest=sel_dig,
        partition_digest=part_dig,
    )


# ---------------------------------------------------------------------------
# toy dynamics generator
# ---------------------------------------------------------------------------

_TOY_BONDS = ((0, 1), (1, 2), (2, 3))
_TOY_ANGLES = ((0, 1, 2), (1, 2, 3))
_TOY_K_BOND = 100.0
_TOY_K_ANGLE = 30.0
_TOY_THETA0 = 1.911      # ~109.5 degrees
_TOY_DIH_AMP = 1.4
_TOY_DT = 0.004          # k_bond * dt = 0.4, inside Euler stability
_TOY_SUBSTEPS = 20
_TOY_BASE_TEMPERATURE = 0.65


def dihedral_angle(p0, p1, p2, p3):
    """Signed dihedral in (-pi, pi] via the atan2 construction."""
    b1 = p1 - p0
    b2 = p2 - p1
    b3 = p3 - p2
    n1 = np.cross(b1, b2)
    n2 = np.cross(b2, b3)
    m1 = np.cross(n1, b2 / np.linalg.norm(b2))
    return float(np.arctan2(m1 @ n2, n1 @ n2))


def _dihedral_gradients(p0, p1, p2, p3):
    """d(phi)/d(p_i) for the four atoms of :func:`dihedral_angle`.

    Derived by differentiating atan2(y, x) with x = n1.n2 and
    y = -|b2| (n1.b3), which is the y used by the angle construction above.
    """
    b1 = p1 - p0
    b2 = p2 - p1
    b3 = p3 - p2
    n1 = np.cross(b1, b2)
    n2 = np.cross(b2, b3)
    nb2 = np.linalg.norm(b2)
    x = n1 @ n2
    y = nb2 * (n1 @ b3)
    denom = x * x + y * y
    db1 = (x * nb2 * n2 - y * np.cross(b2, n2)) / denom
    db2 = (
        x * (b2 / nb2 * (n1 @ b3) + nb2 * np.cross(b3, b1))
        - y * (np.cross(n2, b1) + np.cross(b3, n1))
    ) / denom
    db3 = (x * nb2 * n1 - y * np.cross(n1, b2)) / denom
    return db1, db2 - db1, db3 - db2, -db3


def toy_potential_gradient(x):
    """Energy and gradient of the 4-bead chain potential.

    Terms: stiff harmonic bonds at unit length, harmonic angles, and the
    two-well torsion ``A * sin(2 phi)`` whose minima sit at phi = -pi/4 and
    phi = 3 pi/4.  The phase offset makes the two wells geometrically
    distinct (different 1-4 distance); a parity-even double well would make
    them exact mirror images, which no rotation-invariant feature set can
    tell apart.
    """
    grad = np.zeros_like(x)
    # bonds, vectorized over the three consecutive pairs
    bonds = x[1:] - x[:-1]
    lengths = np.sqrt((bonds * bonds).sum(axis=1))
    stretch = lengths - 1.0
    energy = 0.5 * _TOY_K_BOND * float(stretch @ stretch)
    bond_force = (_TOY_K_BOND * stretch / lengths)[:, None] * bonds
    grad[:-1] -= bond_force
    grad[1:] += bond_force
    # angles at the two inner beads
    a = x[[0, 1]] - x[[1, 2]]
    b = x[[2, 3]] - x[[1, 2]]
    na = np.sqrt((a * a).sum(axis=1))
    nb = np.sqrt((b * b).sum(axis=1))
    cos_t = np.clip((a * b).sum(axis=1) / (na * nb), -1.0, 1.0)
    theta = np.arccos(cos_t)
    sin_t = np.maximum(np.sqrt(1.0 - cos_t * cos_t), 1e-8)
    dev = theta - _TOY_THETA0
    energy += 0.5 * _TOY_K_ANGLE * float(dev @ dev)
    coeff = _TOY_K_ANGLE * dev
    da = (cos_t[:, None] * a / na[:, None] - b / nb[:, None]) / (na * sin_t)[:, None]
    db = (cos_t[:, None] * b / nb[:, None] - a / na[:, None]) / (nb * sin_t)[:, None]
    grad[[0, 1]] += coeff[:, None] * da
    grad[[2, 3]] += coeff[:, None] * db
    grad[[1, 2]] -= coeff[:, None] * (da + db)
    # torsion
    phi = dihedral_angle(x[0], x[1], x[2], x[3])
    energy += _TOY_DIH_AMP * np.sin(2.0 * phi)
    du = 2.0 * _TOY_DIH_AMP * np.cos(2.0 * phi)
    g0, g1, g2, g3 = _dihedral_gradients(x[0], x[1], x[2], x[3])
    grad[0] += du * g0
    grad[1] += du * g1
    grad[2] += du * g2
    grad[3] += du * g3
    return energy, grad


def _toy_step_gradient(p):
    """Scalar-arithmetic twin of :func:`toy_potential_gradient`.

    Operates on a flat list of 12 floats; the integrator calls this tens of
    thousands of times per trajectory, where ndarray overhead on a 4x3
    system dominates runtime.  Tests assert it matches the numpy version.
    """
    g = [0.0] * 12
    energy = 0.0
    # bonds
    for i, j in _TOY_BONDS:
        ax, ay, az = p[3 * i], p[3 * i + 1], p[3 * i + 2]
        bx, by, bz = p[3 * j], p[3 * j + 1], p[3 * j + 2]
        dx, dy, dz = bx - ax, by - ay, bz - az
        r = math.sqrt(dx * dx + dy * dy + dz * dz)
        energy += 0.5 * _TOY_K_BOND * (r - 1.0) ** 2
        c = _TOY_K_BOND * (r - 1.0) / r
        fx, fy, fz = c * dx, c * dy, c * dz
        g[3 * i] -= fx
        g[3 * i + 1] -= fy
        g[3 * i + 2] -= fz
        g[3 * j] += fx
        g[3 * j + 1] += fy
        g[3 * j + 2] += fz
    # angles
    for i, j, k in _TOY_ANGLES:
        ax = p[3 * i] - p[3 * j]
        ay = p[3 * i + 1] - p[3 * j + 1]
        az = p[3 * i + 2] - p[3 * j + 2]
        bx = p[3 * k] - p[3 * j]
        by = p[3 * k + 1] - p[3 * j + 1]
        bz = p[3 * k + 2] - p[3 * j + 2]
        na = math.sqrt(ax * ax + ay * ay + az * az)
        nb = math.sqrt(bx * bx + by * by + bz * bz)
        ct = (ax * bx + ay * by + az * bz) / (na * nb)
        ct = max(-1.0, min(1.0, ct))
        st = max(math.sqrt(1.0 - ct * ct), 1e-8)
        dev = math.acos(ct) - _TOY_THETA0
        energy += 0.5 * _TOY_K_ANGLE * dev * dev
        coeff = _TOY_K_ANGLE * dev
        ca, cb = 1.0 / (na * st), 1.0 / (nb * st)
        dax = (ct * ax / na - bx / nb) * ca
        day = (ct * ay / na - by / nb) * ca
        daz = (ct * az / na - bz / nb) * ca
        dbx = (ct * bx / nb - ax / na) * cb
        dby = (ct * by / nb - ay / na) * cb
        dbz = (ct * bz / nb - az / na) * cb
        g[3 * i] += coeff * dax
        g[3 * i + 1] += coeff * day
        g[3 * i + 2] += coeff * daz
        g[3 * k] += coeff * dbx
        g[3 * k + 1] += coeff * dby
        g[3 * k + 2] += coeff * dbz
        g[3 * j] -= coeff * (dax + dbx)
        g[3 * j + 1] -= coeff * (day + dby)
        g[3 * j + 2] -= coeff * (daz + dbz)
    # torsion
    b1x, b1y, b1z = p[3] - p[0], p[4] - p[1], p[5] - p[2]
    b2x, b2y, b2z = p[6] - p[3], p[7] - p[4], p[8] - p[5]
    b3x, b3y, b3z = p[9] - p[6], p[10] - p[7], p[11] - p[8]
    n1x = b1y * b2z - b1z * b2y
    n1y = b1z * b2x - b1x * b2z
    n1z = b1x * b2y - b1y * b2x
    n2x = b2y * b3z - b2z * b3y
    n2y = b2z * b3x - b2x * b3z
    n2z = b2x * b3y - b2y * b3x
    nb2 = math.sqrt(b2x * b2x + b2y * b2y + b2z * b2z)
    xx = n1x * n2x + n1y * n2y + n1z * n2z
    det = n1x * b3x + n1y * b3y + n1z * b3z
    yy = nb2 * det
    phi = math.atan2(-yy, xx)
    energy += _TOY_DIH_AMP * math.sin(2.0 * phi)
    du = 2.0 * _TOY_DIH_AMP * math.cos(2.0 * phi)
    denom = xx * xx + yy * yy
    # cross products used by the gradient of atan2(y, x)
    c22x = b2y * n2z - b2z * n2y
    c22y = b2z * n2x - b2x * n2z
    c22z = b2x * n2y - b2y * n2x
    c31x = b3y * b1z - b3z * b1y
    c31y = b3z * b1x - b3x * b1z
    c31z = b3x * b1y - b3y * b1x
    cn2b1x = n2y * b1z - n2z * b1y
    cn2b1y = n2z * b1x - n2x * b1z
    cn2b1z = n2x * b1y - n2y * b1x
    cb3n1x = b3y * n1z - b3z * n1y
    cb3n1y = b3z * n1x - b3x * n1z
    cb3n1z = b3x * n1y - b3y * n1x
    cn1b2x = n1y * b2z - n1z * b2y
    cn1b2y = n1z * b2x - n1x * b2z
    cn1b2z = n1x * b2y - n1y * b2x
    db1x = (xx * nb2 * n2x - yy * c22x) / denom
    db1y = (xx * nb2 * n2y - yy * c22y) / denom
    db1z = (xx * nb2 * n2z - yy * c22z) / denom
    db2x = (xx * (b2x / nb2 * det + nb2 * c31x) - yy * (cn2b1x + cb3n1x)) / denom
    db2y = (xx * (b2y / nb2 * det + nb2 * c31y) - yy * (cn2b1y + cb3n1y)) / denom
    db2z = (xx * (b2z / nb2 * det + nb2 * c31z) - yy * (cn2b1z + cb3n1z)) / denom
    db3x = (xx * nb2 * n1x - yy * cn1b2x) / denom
    db3y = (xx * nb2 * n1y - yy * cn1b2y) / denom
    db3z = (xx * nb2 * n1z - yy * cn1b2z) / denom
    g[0] += du * db1x
    g[1] += du * db1y
    g[2] += du * db1z
    g[3] += du * (db2x - db1x)
    g[4] += du * (db2y - db1y)
    g[5] += du * (db2z - db1z)
    g[6] += du * (db3x - db2x)
    g[7] += du * (db3y - db2y)
    g[8] += du * (db3z - db2z)
    g[9] -= du * db3x
    g[10] -= du * db3y
    g[11] -= du * db3z
    return g, phi, energy


def _toy_initial_coords(phi):
    """Build the chain with unit bonds, tetrahedral-ish angles and torsion phi."""
    theta = _TOY_THETA0
    p1 = np.array([0.0, 0.0, 0.0])
    p2 = np.array([1.0, 0.0, 0.0])
    p3 = p2 + np.array([-np.cos(theta), np.sin(theta), 0.0])
    # place p0 at torsion angle phi about the p1->p2 axis
    axis = (p2 - p1) / np.linalg.norm(p2 - p1)
    ref = p3 - p2
    perp = ref - (ref @ axis) * axis
    perp /= np.linalg.norm(perp)
    third = np.cross(axis, perp)
    direction = -np.cos(theta) * (-axis) + np.sin(theta) * (
        np.cos(phi) * perp + np.sin(phi) * third
    )
    # note: dihedral(p0,p1,p2,p3) measured about the central bond p1-p2
    p0 = p1 + direction
    coords = np.stack([p0, p1, p2, p3])
    got = dihedral_angle(*coords)
    # the construction above lands at +-phi depending on handedness; fix sign
    if abs(got - phi) > 1e-6 and abs(abs(got) - abs(phi)) < 1e-6:
        coords[0, 2] *= -1.0
    return coords


def toy_topology():
    return Topology(
        elements=np.array([6, 6, 6, 6]),
        residue_index=np.array([0, 1, 2, 3]),
        residue_names=("CH3", "CH2", "CH2", "CH3"),
        atom_names=("C1", "C2", "C3", "C4"),
    )


def generate_toy_trajectory(n_frames, temperature_factor=1.0, seed=0):
    """Metropolis-adjusted overdamped Langevin run of the torsional double well.

    The Metropolis correction removes the Euler discretization bias, which
    at usable step sizes is large enough to tilt the two wells' relative
    populations; with it the chain samples the exact Boltzmann distribution
    and satisfies detailed balance.

    In the shifted torsion psi = phi - pi/4 the potential is the symmetric
    double well cos(2 psi) with minima at psi = +-pi/2, and the returned
    labels are sign(psi): 1 for the well at phi = 3 pi/4 and 0 for the well
    at phi = -pi/4.  The sign boundaries coincide with the barrier tops, so
    the labels are the exact basin indicator.
    """
    if n_frames < 1:
        raise ConfigError("n_frames must be >= 1")
    rng = np.random.default_rng(seed)
    temperature = max(_TOY_BASE_TEMPERATURE * temperature_factor, 1e-30)
    dt = _TOY_DT
    noise_scale = math.sqrt(2.0 * temperature * dt)
    p = list(_toy_initial_coords(3.0 * np.pi / 4.0).ravel())
    grad, _, energy = _toy_step_gradient(p)
    frames = np.empty((n_frames, 4, 3))
    labels = np.empty(n_frames, dtype=np.int64)
    for f in range(n_frames):
        noise = (noise_scale * rng.standard_normal((_TOY_SUBSTEPS, 12))).tolist()
        log_u = np.log(rng.random(_TOY_SUBSTEPS)).tolist()
        for step_noise, log_accept_draw in zip(noise, log_u):
            proposal = [p[c] - grad[c] * dt + step_noise[c] for c in range(12)]
            grad_p, _, energy_p = _toy_step_gradient(proposal)
            fwd = sum(n * n for n in step_noise)
            rev = sum(
                (p[c] - proposal[c] + dt * grad_p[c]) ** 2 for c in range(12)
            )
            log_alpha = -(energy_p - energy) / temperature - (rev - fwd) / (4.0 * temperature * dt)
            if log_accept_draw < log_alpha:
                p, grad, energy = proposal, grad_p, energy_p
        frame = np.array(p).reshape(4, 3)
        frame -= frame.mean(axis=0)
        frames[f] = frame
        labels[f] = 1 if toy_well_label(dihedral_angle(*frame)) else 0
    return Trajectory(frames, frame_interval=0.2), toy_topology(), labels


def toy_well_label(phi):
    """sign of the shifted torsion psi = phi - pi/4, wrapped to (-pi, pi]."""
    psi = phi - np.pi / 4.0
    if psi <= -np.pi:
        psi += 2.0 * np.pi
    return psi >= 0.0
