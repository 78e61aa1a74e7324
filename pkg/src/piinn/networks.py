"""Fully-connected networks, the neural basis net and checkpoint IO.

Networks are architecture descriptors that look their weights up by name in
a :class:`ParamSet`.  Evaluation functions take an optional weight mapping
``w`` (name -> ndarray or tape variable); by default the current numpy
snapshot of the owning parameter set is used.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad


class ParamSet:
    """Named real arrays stored as views into one flat float64 buffer."""

    def __init__(self):
        self._names: list[str] = []
        self._shapes: list[tuple] = []
        self._init: list[np.ndarray] = []
        self.flat = np.zeros(0)
        self._views: dict[str, np.ndarray] = {}
        self._frozen = False

    def add(self, name, array):
        if self._frozen:
            raise RuntimeError("parameter set already frozen")
        if name in self._names:
            raise KeyError("duplicate parameter %r" % name)
        arr = np.asarray(array, dtype=np.float64)
        self._names.append(name)
        self._shapes.append(arr.shape)
        self._init.append(arr.copy())
        return name

    def freeze(self):
        if self._frozen:
            return self
        sizes = [int(np.prod(s)) for s in self._shapes]
        self.flat = np.concatenate([a.ravel() for a in self._init]) if sizes else np.zeros(0)
        self._views = {}
        off = 0
        for name, shape, n in zip(self._names, self._shapes, sizes):
            self._views[name] = self.flat[off:off + n].reshape(shape)
            off += n
        self._init = []
        self._frozen = True
        return self

    @property
    def names(self):
        return list(self._names)

    @property
    def shapes(self):
        return list(self._shapes)

    @property
    def size(self):
        return int(self.flat.size)

    def __getitem__(self, name):
        self.freeze()
        return self._views[name]

    def __contains__(self, name):
        return name in self._names

    def arrays(self):
        """Read-only snapshot mapping for numpy evaluation."""
        self.freeze()
        return dict(self._views)

    def bind(self, tape):
        """Register every parameter as a differentiable leaf of ``tape``."""
        self.freeze()
        return {n: tape.leaf(v) for n, v in self._views.items()}

    def flat_grad(self, grads, bound):
        """Concatenate per-parameter gradients in storage order."""
        return np.concatenate([grads[bound[n]].ravel() for n in self._names])

    def set_flat(self, vec):
        self.freeze()
        self.flat[...] = vec

    def copy(self):
        self.freeze()
        out = ParamSet()
        for n in self._names:
            out.add(n, self._views[n])
        return out.freeze()


def _resolve(params, w):
    return params.arrays() if w is None else w


@dataclass
class MlpSpec:
    """Affine layers with ReLU on hidden layers and identity output.

    With ``copies > 1`` the spec describes that many independent networks of
    the same shape whose weights are stacked along a leading axis; one
    evaluation returns all outputs, shape (copies, ..., out).
    """

    widths: list[int]
    prefix: str
    params: ParamSet = field(repr=False)
    copies: int = 1

    def __post_init__(self):
        if len(self.widths) < 2 or any(int(k) < 1 for k in self.widths):
            raise ValueError("widths must be >= 2 positive integers, got %r" % (self.widths,))
        self._keys = [(f"{self.prefix}.W{k}", f"{self.prefix}.b{k}") for k in range(self.n_layers)]

    @classmethod
    def build(cls, params, prefix, widths, rng, zero_last=False, copies=1):
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init; optional zero output layer."""
        widths = [int(k) for k in widths]
        lead = () if copies == 1 else (copies,)
        for k in range(len(widths) - 1):
            fan_in, fan_out = widths[k], widths[k + 1]
            bound = 1.0 / np.sqrt(fan_in)
            last = k == len(widths) - 2
            bshape = (fan_out,) if copies == 1 else (copies, 1, fan_out)
            if last and zero_last:
                W = np.zeros(lead + (fan_in, fan_out))
                b = np.zeros(bshape)
            else:
                W = rng.uniform(-bound, bound, size=lead + (fan_in, fan_out))
                b = rng.uniform(-bound, bound, size=bshape)
            params.add(f"{prefix}.W{k}", W)
            params.add(f"{prefix}.b{k}", b)
        return cls(widths, prefix, params, copies)

    @property
    def n_layers(self):
        return len(self.widths) - 1

    def weight_names(self):
        out = []
        for k in range(self.n_layers):
            out += [f"{self.prefix}.W{k}", f"{self.prefix}.b{k}"]
        return out


def mlp_forward(spec: MlpSpec, x, w=None):
    """Evaluate the MLP on a vector or a batch of row vectors."""
    w = _resolve(spec.params, w)
    if np.shape(ad.value(x))[-1] != spec.widths[0]:
        raise ValueError("input width %d != %d" % (np.shape(ad.value(x))[-1], spec.widths[0]))
    h = x
    last = spec.n_layers - 1
    for k, (wk, bk) in enumerate(spec._keys):
        h = h @ w[wk] + w[bk]
        if k < last:
            h = ad.relu(h)
    return h


@dataclass
class NeuralBasis:
    """NB-Net: maps spatial points of a box domain to P basis values.

    Coordinates are affinely rescaled to [-1, 1]^d before the first layer;
    the rescaling is part of the differentiated map.
    """

    net: MlpSpec
    lower: np.ndarray
    upper: np.ndarray

    @classmethod
    def build(cls, params, prefix, dim, n_basis, hidden, rng, lower=None, upper=None):
        lower = np.zeros(dim) if lower is None else np.asarray(lower, dtype=np.float64)
        upper = np.ones(dim) if upper is None else np.asarray(upper, dtype=np.float64)
        net = MlpSpec.build(params, prefix, [dim, *hidden, n_basis], rng)
        return cls(net, lower, upper)

    @property
    def dim(self):
        return self.net.widths[0]

    @property
    def P(self):
        return self.net.widths[-1]

    def _scale(self):
        return 2.0 / (self.upper - self.lower)

    def __call__(self, x, w=None):
        scale = self._scale()
        shift = -self.lower * scale - 1.0
        return mlp_forward(self.net, x * scale + shift, w)


def _points(basis, points):
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1 and basis.dim == 1:
        pts = pts[:, None]
    elif pts.ndim == 1:
        pts = pts[None, :]
    if pts.shape[0] == 0:
        raise ValueError("empty point list")
    if pts.shape[1] != basis.dim:
        raise ValueError("points have dimension %d, basis expects %d" % (pts.shape[1], basis.dim))
    return pts


def assemble_basis(basis: NeuralBasis, points, w=None):
    """Basis matrix with rows phi(x_j); shape (M, P)."""
    return basis(_points(basis, points), w)


def reconstruct_u(phi, c):
    """u = Phi c.  ``c`` may be a vector (P,) or a batch (N, P) -> (N, M)."""
    P = np.shape(ad.value(phi))[-1]
    cs = np.shape(ad.value(c))
    if cs[-1] != P:
        raise ValueError("coefficient length %d != basis count %d" % (cs[-1], P))
    if len(cs) == 1:
        return ad.sum(phi * c, axis=1)
    return c @ ad.transpose(phi)


def basis_with_gradient(basis: NeuralBasis, points, w=None):
    """Basis values and per-axis derivatives at a set of points.

    Returns ``(phi, grads)`` where ``phi`` has shape (M, P) and ``grads[k]``
    holds d phi / d x_k with the same shape.  Derivatives come from forward
    duals, one tangent per axis.
    """
    pts = _points(basis, points)
    M, d = pts.shape
    tangents = []
    for k in range(d):
        e = np.zeros((M, d))
        e[:, k] = 1.0
        tangents.append(e)
    out = basis(ad.Dual(pts, tangents), w)
    return out.primal, list(out.tangents)


def basis_spatial_gradient(basis: NeuralBasis, point, w=None):
    """Matrix (d, P) whose column i is grad phi_i at ``point``."""
    pts = _points(basis, point)
    if pts.shape[0] != 1:
        raise ValueError("expected a single point")
    cols = []
    for k in range(basis.dim):
        e = np.zeros_like(pts)
        e[0, k] = 1.0
        cols.append(ad.directional_derivative(lambda x: basis(x, w), pts, e))
    return np.vstack([np.asarray(ad.value(c)).reshape(1, -1) for c in cols])


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"PIINNCK1"


def config_hash(config):
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(params: ParamSet, path, seed=None, config=None):
    """Write ``<path>`` (binary) and ``<path>.json`` (manifest).

    Binary layout, little-endian: magic, u32 count, then per array
    u32 name length, utf-8 name, u32 ndim, u64 dims, f64 data.
    """
    params.freeze()
    path = Path(path)
    chunks = [_MAGIC, struct.pack("<I", len(params.names))]
    for name, shape in zip(params.names, params.shapes):
        raw = name.encode()
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", len(shape)))
        chunks.append(struct.pack("<%dQ" % len(shape), *shape))
        chunks.append(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    blob = b"".join(chunks)
    path.write_bytes(blob)
    manifest = {
        "format": "piinn-checkpoint-v1",
        "arrays": [{"name": n, "shape": list(s)} for n, s in zip(params.names, params.shapes)],
        "seed": seed,
        "config_hash": config_hash(config) if config is not None else None,
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2))
    return manifest


def load_checkpoint(path):
    """Read a checkpoint into an ordered dict name -> array."""
    blob = Path(path).read_bytes()
    if blob[:8] != _MAGIC:
        raise ValueError("not a checkpoint file: %s" % path)
    pos = 8
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from("<%dQ" % ndim, blob, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    return out


def restore_params(params: ParamSet, arrays):
    params.freeze()
    missing = set(params.names) - set(arrays)
    if missing:
        raise KeyError("checkpoint lacks %s" % sorted(missing))
    for name in params.names:
        params[name][...] = arrays[name]
    return params
