"""Set-of-features poolers and normalizers.

Count sketch, compact bilinear pooling (tensor sketch), NetVLAD, PCA and the
power / L2 normalizers, each with the backward pass needed for training and
gradient checking. Feature sets are ``(N, D)`` arrays; most functions also
accept extra leading batch axes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numkit
from .errors import EmptyInput, InvalidLength, InvalidReduction

L2_EPS = 1e-12


# --------------------------------------------------------------------------
# count sketch / compact bilinear pooling
# --------------------------------------------------------------------------

def sketch_matrix(h, s, d: int) -> np.ndarray:
    """Dense ``(D, d)`` matrix with ``M[i, h[i]] = s[i]``."""
    h = np.asarray(h, dtype=np.int64)
    s = np.asarray(s, dtype=np.float64)
    if h.shape != s.shape or h.ndim != 1:
        raise InvalidLength("hash and sign maps must be 1-D of equal size")
    if np.any(h < 0) or np.any(h >= d):
        raise InvalidLength(f"hash indices must lie in [0, {d})")
    mat = np.zeros((h.size, d))
    mat[np.arange(h.size), h] = s
    return mat


def count_sketch(x, h, s, d: int) -> np.ndarray:
    """``out[j] = sum_{i: h[i] = j} s[i] * x[i]`` on the last axis of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != len(h):
        raise InvalidLength(f"input has {x.shape[-1]} entries, maps have {len(h)}")
    return x @ sketch_matrix(h, s, d)


@dataclass(frozen=True, eq=False)
class SketchParams:
    """Frozen random maps of a tensor sketch. Fully determined by ``(D, d, seed)``."""

    input_dim: int
    sketch_dim: int
    seed: int
    h1: np.ndarray
    h2: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    _mats: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def generate(cls, input_dim: int, sketch_dim: int, seed: int) -> "SketchParams":
        if input_dim < 1:
            raise InvalidLength("sketch input dimension must be positive")
        if not numkit.is_power_of_two(sketch_dim):
            raise InvalidLength(f"sketch dimension must be a power of two, got {sketch_dim}")
        rng = np.random.default_rng(seed)
        h1 = rng.integers(0, sketch_dim, size=input_dim)
        h2 = rng.integers(0, sketch_dim, size=input_dim)
        s1 = 2 * rng.integers(0, 2, size=input_dim) - 1
        s2 = 2 * rng.integers(0, 2, size=input_dim) - 1
        return cls(int(input_dim), int(sketch_dim), int(seed), h1, h2, s1, s2)

    @property
    def matrices(self) -> tuple[np.ndarray, np.ndarray]:
        if "m" not in self._mats:
            self._mats["m"] = (sketch_matrix(self.h1, self.s1, self.sketch_dim),
                               sketch_matrix(self.h2, self.s2, self.sketch_dim))
        return self._mats["m"]

    @property
    def spectra(self) -> tuple[np.ndarray, np.ndarray]:
        """Row-wise FFT of both sketch matrices, so ``fft(x @ m) == x @ fft(m)``."""
        if "f" not in self._mats:
            m1, m2 = self.matrices
            self._mats["f"] = (numkit.fft(m1), numkit.fft(m2))
        return self._mats["f"]

    def feature_spectra(self, x) -> np.ndarray:
        """Spectrum of the tensor sketch of each ``x x^T`` along the last axis."""
        if "f" not in self._mats and int(np.prod(x.shape[:-1])) < self.input_dim:
            # few rows: transforming the sketched rows beats transforming the maps
            m1, m2 = self.matrices
            return numkit.fft(x @ m1) * numkit.fft(x @ m2)
        f1, f2 = self.spectra
        return (x @ f1) * (x @ f2)


def _check_features(features, dim: int | None = None) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim < 2:
        raise InvalidLength("features must be an (N, D) array")
    if x.shape[-2] == 0:
        raise EmptyInput("cannot pool an empty feature set")
    if dim is not None and x.shape[-1] != dim:
        raise InvalidLength(f"feature dimension {x.shape[-1]} != expected {dim}")
    return x


def cbp_pool(features, params: SketchParams) -> np.ndarray:
    """Compact bilinear pooling of a feature set.

    Sums the tensor sketch of every ``x x^T`` in the set: the two count
    sketches of each feature are combined by circular convolution, computed
    as a pointwise product of their spectra. The sum is taken in the Fourier
    domain, which is exact since the inverse transform is linear, and the
    count sketches are transformed through the precomputed spectra of the
    sketch matrices.

    Args:
        features: ``(..., N, D)`` array.
        params: sketch maps with ``input_dim == D``.

    Returns:
        ``(..., d)`` array.
    """
    x = _check_features(features, params.input_dim)
    return numkit.ifft(params.feature_spectra(x).sum(axis=-2)).real


def cbp_pool_backward(features, params: SketchParams, grad_out) -> np.ndarray:
    """Gradient of ``<grad_out, cbp_pool(features)>`` with respect to ``features``."""
    x = _check_features(features, params.input_dim)
    m1, m2 = params.matrices
    g = np.asarray(grad_out, dtype=np.float64)[..., None, :]
    a = x @ m1
    b = x @ m2
    g_hat = numkit.fft(g)
    grad_a = numkit.ifft(g_hat * np.conj(numkit.fft(b))).real
    grad_b = numkit.ifft(g_hat * np.conj(numkit.fft(a))).real
    return grad_a @ m1.T + grad_b @ m2.T


def bilinear_pool(features) -> np.ndarray:
    """Exact summed outer product, flattened to ``D*D``. Reference only."""
    x = _check_features(features)
    return np.einsum("...ni,...nj->...ij", x, x).reshape(x.shape[:-2] + (-1,))


# --------------------------------------------------------------------------
# normalizers
# --------------------------------------------------------------------------

def power_normalize(x, sigma: float = 0.5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.abs(x) ** sigma


def power_normalize_backward(x, grad_out, sigma: float = 0.5) -> np.ndarray:
    # derivative is unbounded at 0; zero entries get zero gradient
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    with np.errstate(divide="ignore"):
        d = np.where(ax > 0, sigma * ax ** (sigma - 1.0), 0.0)
    return d * grad_out


def l2_normalize(x) -> np.ndarray:
    """Unit-normalize along the last axis; rows with norm <= 1e-12 pass through."""
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.where(n > L2_EPS, x / np.where(n > L2_EPS, n, 1.0), x)


def l2_normalize_backward(x, grad_out) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(grad_out, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    safe = np.where(n > L2_EPS, n, 1.0)
    y = x / safe
    proj = g - y * np.sum(y * g, axis=-1, keepdims=True)
    return np.where(n > L2_EPS, proj / safe, g)


# --------------------------------------------------------------------------
# NetVLAD
# --------------------------------------------------------------------------

@dataclass
class NetVladParams:
    centers: np.ndarray  # (C, D)
    weights: np.ndarray  # (C, D)
    biases: np.ndarray   # (C,)

    @property
    def clusters(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @property
    def output_dim(self) -> int:
        return self.clusters * self.dim

    @classmethod
    def from_centers(cls, centers, alpha: float = 10.0) -> "NetVladParams":
        centers = np.array(centers, dtype=np.float64)
        return cls(centers, 2.0 * alpha * centers, -alpha * np.sum(centers ** 2, axis=1))

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"centers": self.centers, "weights": self.weights, "biases": self.biases}


def kmeans(samples, k: int, iters: int = 20, seed: int = 0) -> np.ndarray:
    """Plain Lloyd iterations from a seeded random draw of the samples."""
    x = np.asarray(samples, dtype=np.float64)
    if x.shape[0] == 0:
        raise EmptyInput("k-means needs at least one sample")
    rng = np.random.default_rng(seed)
    replace = x.shape[0] < k
    centers = x[rng.choice(x.shape[0], size=k, replace=replace)].copy()
    if replace:
        centers += 1e-3 * rng.standard_normal(centers.shape)
    for _ in range(iters):
        d2 = (np.sum(x ** 2, axis=1)[:, None] - 2 * x @ centers.T
              + np.sum(centers ** 2, axis=1)[None, :])
        assign = np.argmin(d2, axis=1)
        for c in range(k):
            members = x[assign == c]
            if len(members):
                centers[c] = members.mean(axis=0)
            else:
                centers[c] = x[np.argmax(np.min(d2, axis=1))]
    return centers


def init_netvlad(samples, clusters: int = 32, seed: int = 0, alpha: float = 10.0,
                 iters: int = 20, max_samples: int = 20000) -> NetVladParams:
    x = np.asarray(samples, dtype=np.float64)
    if x.shape[0] > max_samples:
        rng = np.random.default_rng(seed)
        x = x[rng.choice(x.shape[0], size=max_samples, replace=False)]
    return NetVladParams.from_centers(kmeans(x, clusters, iters=iters, seed=seed), alpha)


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def netvlad_forward(features, params: NetVladParams, mask=None):
    """Returns ``(output, cache)``; ``cache`` feeds :func:`netvlad_backward`.

    ``features`` is one ``(N, D)`` set or a padded batch ``(B, N, D)``; in the
    batched case ``mask`` (``(B, N)``, 1 for real rows) marks the padding.
    """
    x = _check_features(features, params.dim)
    a = _softmax(x @ params.weights.T + params.biases)
    if mask is not None:
        a = a * np.asarray(mask, dtype=np.float64)[..., None]
    resid = np.einsum("...nc,...nd->...cd", a, x) - a.sum(axis=-2)[..., None] * params.centers
    blocks = l2_normalize(resid)
    flat = blocks.reshape(blocks.shape[:-2] + (-1,))
    out = l2_normalize(flat)
    return out, (x, a, resid, flat)


def netvlad_pool(features, params: NetVladParams) -> np.ndarray:
    """Soft-assignment residual aggregation, intra- and globally L2-normalized."""
    return netvlad_forward(features, params)[0]


def netvlad_backward(cache, params: NetVladParams, grad_out) -> tuple[np.ndarray, dict]:
    """Backward pass. Returns ``(grad_features, {"centers", "weights", "biases"})``.

    Parameter gradients are summed over a leading batch axis, if any.
    """
    x, a, resid, flat = cache
    g_flat = l2_normalize_backward(flat, grad_out)
    g_resid = l2_normalize_backward(resid, g_flat.reshape(resid.shape))
    g_x = np.einsum("...nc,...cd->...nd", a, g_resid)
    lead = tuple(range(resid.ndim - 2))
    g_centers = -np.sum(a.sum(axis=-2)[..., None] * g_resid, axis=lead)
    g_a = (np.einsum("...nd,...cd->...nc", x, g_resid)
           - np.sum(g_resid * params.centers, axis=-1)[..., None, :])
    g_z = a * (g_a - np.sum(a * g_a, axis=-1, keepdims=True))
    g_x += g_z @ params.weights
    z2 = g_z.reshape(-1, g_z.shape[-1])
    grads = {"centers": g_centers, "weights": z2.T @ x.reshape(-1, x.shape[-1]), "biases": z2.sum(axis=0)}
    return g_x, grads


# --------------------------------------------------------------------------
# PCA
# --------------------------------------------------------------------------

@dataclass
class PcaModel:
    mean: np.ndarray                 # (D,)
    basis: np.ndarray                # (D, r), orthonormal columns
    explained_variance: np.ndarray   # (r,)
    total_variance: float = 1.0

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    @property
    def explained_variance_ratio(self) -> np.ndarray:
        return self.explained_variance / self.total_variance


def pca_fit(samples, r: int) -> PcaModel:
    """Top-``r`` principal axes of ``samples`` via SVD of the centered data."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidReduction("samples must be an (n, D) array")
    n, dim = x.shape
    if r < 1 or r > dim:
        raise InvalidReduction(f"reduced dimension {r} must lie in [1, {dim}]")
    if n < r + 1:
        raise InvalidReduction(f"need at least {r + 1} samples, got {n}")
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    var = s ** 2 / (n - 1)
    basis = vt[:r].T.copy()
    # fix the sign ambiguity: largest-magnitude loading of each axis is positive
    flip = np.sign(basis[np.argmax(np.abs(basis), axis=0), np.arange(r)])
    basis *= np.where(flip == 0, 1.0, flip)
    return PcaModel(mean, basis, var[:r].copy(), total_variance=float(var.sum()))


def pca_transform(x, model: PcaModel) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.mean.shape[0]:
        raise InvalidLength(f"expected dimension {model.mean.shape[0]}, got {x.shape[-1]}")
    return (x - model.mean) @ model.basis
