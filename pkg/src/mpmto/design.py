"""Design fields and material interpolation.

Two representations map to per-particle material parameters: a plain
pseudodensity per particle, and a coordinate network (Fourier features,
two ReLU layers, softmax) that yields volume fractions of ``S`` materials.
Both are evaluated on the reference particle coordinates, so the design
travels with the particles.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

MAGIC = b"MPMTODF\x00"
FORMAT_VERSION = 1


@dataclass
class MaterialCatalog:
    """Lame constants (Pa) and densities (kg/m^3) of the candidate materials."""

    lam: np.ndarray
    mu: np.ndarray
    rho: np.ndarray
    names: tuple = ()
    colors: tuple = ()
    # stiffness floor under the penalised single-material value
    floor: float = 1e-6

    def __post_init__(self):
        self.lam = np.atleast_1d(np.asarray(self.lam, dtype=float))
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        self.rho = np.atleast_1d(np.asarray(self.rho, dtype=float))
        if not (self.lam.shape == self.mu.shape == self.rho.shape) or self.lam.ndim != 1:
            raise ConfigError("materials", "lambda, mu and rho need one entry per material")
        if self.lam.size < 1:
            raise ConfigError("materials", "at least one material is required")
        if np.any(self.mu <= 0) or np.any(self.rho <= 0) or np.any(self.lam < 0):
            raise ConfigError("materials", "need mu > 0, rho > 0 and lambda >= 0")
        if not self.names:
            self.names = tuple(f"material{i + 1}" for i in range(self.size))
        if not self.colors:
            self.colors = tuple("#808080" for _ in range(self.size))

    @property
    def size(self):
        return self.lam.size


def interp_multi(v, catalog: MaterialCatalog, q):
    """Penalised stiffness and linear density mixtures of volume fractions ``v``."""
    v = np.asarray(v, dtype=float)
    vq = v ** q
    return vq @ catalog.lam, vq @ catalog.mu, v @ catalog.rho


def interp_multi_vjp(v, catalog: MaterialCatalog, q, lam_bar, mu_bar, rho_bar):
    """Cotangent of ``v`` given cotangents of the three mixtures."""
    v = np.asarray(v, dtype=float)
    dvq = q * v ** (q - 1.0)
    return (dvq * (np.asarray(lam_bar)[..., None] * catalog.lam
                   + np.asarray(mu_bar)[..., None] * catalog.mu)
            + np.asarray(rho_bar)[..., None] * catalog.rho)


def interp_single(gamma, catalog: MaterialCatalog, q):
    """SIMP map of pseudodensity to material 0 with an additive stiffness floor."""
    g = np.asarray(gamma, dtype=float)
    lam0, mu0, rho0 = catalog.lam[0], catalog.mu[0], catalog.rho[0]
    gq = g ** q
    return ((gq + catalog.floor) * lam0, (gq + catalog.floor) * mu0, g * rho0)


def interp_single_vjp(gamma, catalog: MaterialCatalog, q, lam_bar, mu_bar, rho_bar):
    g = np.asarray(gamma, dtype=float)
    dgq = q * g ** (q - 1.0)
    return (dgq * (lam_bar * catalog.lam[0] + mu_bar * catalog.mu[0])
            + rho_bar * catalog.rho[0])


# --------------------------------------------------------------------------
# pseudodensity

@dataclass
class PseudoDensityField:
    gamma: np.ndarray
    kind: str = field(default="density", init=False)

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=float).copy()
        if np.any(self.gamma < 0) or np.any(self.gamma > 1):
            raise ConfigError("design.gamma", "pseudodensities must lie in [0, 1]")

    @classmethod
    def uniform(cls, n, value):
        return cls(np.full(n, float(value)))

    @property
    def n_params(self):
        return self.gamma.size

    def get_params(self):
        return self.gamma.copy()

    def set_params(self, theta):
        self.gamma = np.clip(np.asarray(theta, dtype=float), 0.0, 1.0).copy()

    def copy(self):
        return PseudoDensityField(self.gamma)


# --------------------------------------------------------------------------
# coordinate network

def fourier_project(x, freqs, box):
    """``[cos(2 pi B x_hat), sin(2 pi B x_hat)]`` with ``x_hat`` scaled to the box."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    lo = np.asarray(box[:2], dtype=float)
    hi = np.asarray(box[2:], dtype=float)
    xh = (x - lo) / (hi - lo)
    arg = 2.0 * np.pi * xh @ freqs.T
    return np.concatenate([np.cos(arg), np.sin(arg)], axis=1)


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class NeuralDesignField:
    """Dense network over Fourier features; weights are stored (fan_in, fan_out)."""

    freqs: np.ndarray
    weights: list
    biases: list
    box: tuple
    seed: int = 0
    sigma_f: float = 10.0
    kind: str = field(default="neural", init=False)

    @classmethod
    def initialize(cls, n_materials, box, seed=0, n_fourier=100, hidden=(40, 40),
                   sigma_f=10.0, output_scale=1e-2):
        """Xavier-normal weights and zero biases.

        The output layer is additionally scaled by ``output_scale`` so the
        initial fractions sit close to ``1 / S`` everywhere.
        """
        if n_materials < 1:
            raise ConfigError("design.n_materials", "need at least one material")
        rng = np.random.default_rng(seed)
        freqs = rng.normal(0.0, sigma_f, size=(n_fourier, 2))
        sizes = [2 * n_fourier, *hidden, n_materials]
        weights, biases = [], []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            w = rng.normal(0.0, np.sqrt(2.0 / (a + b)), size=(a, b))
            if i == len(sizes) - 2:
                w *= output_scale
            weights.append(w)
            biases.append(np.zeros(b))
        return cls(freqs, weights, biases, tuple(float(v) for v in box), seed, sigma_f)

    @property
    def n_materials(self):
        return self.weights[-1].shape[1]

    @property
    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def get_params(self):
        return np.concatenate([a.ravel() for w, b in zip(self.weights, self.biases)
                               for a in (w, b)])

    def set_params(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {theta.size}")
        i = 0
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[k] = theta[i:i + w.size].reshape(w.shape).copy()
            i += w.size
            self.biases[k] = theta[i:i + b.size].copy()
            i += b.size

    def copy(self):
        return NeuralDesignField(self.freqs.copy(), [w.copy() for w in self.weights],
                                 [b.copy() for b in self.biases], self.box, self.seed,
                                 self.sigma_f)

    def forward(self, x, return_cache=False):
        a = fourier_project(x, self.freqs, self.box)
        cache = [a]
        n_layers = len(self.weights)
        for k in range(n_layers):
            z = a @ self.weights[k] + self.biases[k]
            a = np.maximum(z, 0.0) if k < n_layers - 1 else softmax(z)
            cache.append(a)
        return (a, cache) if return_cache else a

    def backward(self, cache, v_bar):
        """Gradient of ``sum(v_bar * v)`` with respect to the flat parameters."""
        v = cache[-1]
        # softmax pullback
        dz = v * (v_bar - np.sum(v_bar * v, axis=1, keepdims=True))
        grads = []
        for k in range(len(self.weights) - 1, -1, -1):
            a_in = cache[k]
            grads.append((a_in.T @ dz, dz.sum(axis=0)))
            if k > 0:
                dz = (dz @ self.weights[k].T) * (cache[k] > 0)
        grads.reverse()
        return np.concatenate([a.ravel() for gw, gb in grads for a in (gw, gb)])


def nn_forward(x, field: NeuralDesignField):
    return field.forward(x)


# --------------------------------------------------------------------------
# design -> particle parameters

@dataclass
class DesignEvaluation:
    lam: np.ndarray
    mu: np.ndarray
    rho: np.ndarray
    values: np.ndarray
    q: float
    cache: list = None


def evaluate_design(design, points, catalog: MaterialCatalog, q, passive=None):
    """Per-particle ``(lambda, mu, rho)`` plus the raw design values.

    ``passive`` maps particle indices to a fixed value: a pseudodensity for
    density designs or a material index for network designs.
    """
    if design.kind == "density":
        values = design.gamma.copy()
        if values.size != len(points):
            raise ConfigError("design.gamma", f"expected {len(points)} values, got {values.size}")
        if passive is not None:
            idx, val = passive
            values[idx] = val
        lam, mu, rho = interp_single(values, catalog, q)
        return DesignEvaluation(lam, mu, rho, values, q)
    if design.n_materials != catalog.size:
        raise ConfigError("design.n_materials", "network outputs do not match the catalog")
    values, cache = design.forward(points.X0, return_cache=True)
    if passive is not None:
        idx, mat = passive
        values = values.copy()
        values[idx] = 0.0
        values[idx, mat] = 1.0
    lam, mu, rho = interp_multi(values, catalog, q)
    return DesignEvaluation(lam, mu, rho, values, q, cache)


def design_vjp(design, ev: DesignEvaluation, catalog: MaterialCatalog,
               lam_bar, mu_bar, rho_bar, passive=None, value_bar=None):
    """Pull per-particle parameter cotangents back to the design parameters.

    ``value_bar`` adds a direct cotangent on the design values (e.g. from a
    volume constraint).
    """
    if design.kind == "density":
        g = interp_single_vjp(ev.values, catalog, ev.q, lam_bar, mu_bar, rho_bar)
        if value_bar is not None:
            g = g + value_bar
        if passive is not None:
            g = g.copy()
            g[passive[0]] = 0.0
        return g
    vb = interp_multi_vjp(ev.values, catalog, ev.q, lam_bar, mu_bar, rho_bar)
    if value_bar is not None:
        vb = vb + value_bar
    if passive is not None:
        vb = vb.copy()
        vb[passive[0]] = 0.0
    return design.backward(ev.cache, vb)


# --------------------------------------------------------------------------
# serialisation
#
# layout: 8-byte magic, uint32 version, uint32 header length, UTF-8 JSON
# header, then the arrays listed in the header as little-endian float64 in
# C order.

def _arrays(design):
    if design.kind == "density":
        return [("gamma", design.gamma)]
    out = [("freqs", design.freqs)]
    for k, (w, b) in enumerate(zip(design.weights, design.biases)):
        out += [(f"W{k}", w), (f"b{k}", b)]
    return out


def dumps_design(design) -> bytes:
    arrays = _arrays(design)
    header = {"type": design.kind,
              "arrays": [[name, list(a.shape)] for name, a in arrays]}
    if design.kind == "neural":
        header.update(S=design.n_materials, dims=2, seed=design.seed,
                      sigma_f=design.sigma_f, box=list(design.box))
    else:
        header.update(n=design.gamma.size)
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    return MAGIC + struct.pack("<II", FORMAT_VERSION, len(hb)) + hb + body


def loads_design(data: bytes):
    if data[:8] != MAGIC:
        raise ValueError("not a design file (bad magic)")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported design file version {version}")
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    off = 16 + hlen
    arrays = {}
    for name, shape in header["arrays"]:
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).astype(float)
        off += 8 * n
    if off != len(data):
        raise ValueError("design file has trailing or missing bytes")
    if header["type"] == "density":
        return PseudoDensityField(arrays["gamma"])
    n_layers = sum(1 for name, _ in header["arrays"] if name.startswith("W"))
    return NeuralDesignField(arrays["freqs"],
                             [arrays[f"W{k}"] for k in range(n_layers)],
                             [arrays[f"b{k}"] for k in range(n_layers)],
                             tuple(header["box"]), header["seed"], header["sigma_f"])


def save_design(design, path):
    with open(path, "wb") as fh:
        fh.write(dumps_design(design))


def load_design(path):
    with open(path, "rb") as fh:
        return loads_design(fh.read())
