"""Decoder geometry and latent-space interpretability tools.

All probes use mean encodings, so every report is deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .autodiff import Tape, Tensor, backward, no_grad, ops
from .errors import ConfigurationError, DimensionError

MAX_SVD_DIM = 8


@dataclass
class JacobianReport:
    z: np.ndarray
    J: np.ndarray
    singular_values: np.ndarray
    right_vectors: np.ndarray
    frobenius: float
    logdet_pullback: float

    def to_dict(self) -> dict:
        return {
            "z": self.z.tolist(),
            "singular_values": self.singular_values.tolist(),
            "frobenius": self.frobenius,
            "logdet_pullback": self.logdet_pullback,
        }


def _latent_dim(model) -> int:
    return int(model.arch.latent_dim)


def _decode_np(model, Z: np.ndarray) -> np.ndarray:
    with no_grad():
        out = model.decode(Tensor(np.atleast_2d(Z)))
    return out.data if isinstance(out, Tensor) else np.asarray(out)


def jacobian_svd(J: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Singular values (descending) and right singular vectors of a tall ``J``.

    Uses the symmetric eigendecomposition of the m x m Gram matrix ``J^T J``,
    which is cheap and accurate for the small latent widths used here.
    """
    J = np.asarray(J, dtype=np.float64)
    if J.ndim != 2:
        raise DimensionError(f"Jacobian must be 2D, got shape {J.shape}")
    m = J.shape[1]
    if m > MAX_SVD_DIM:
        raise ConfigurationError(f"jacobian_svd supports m <= {MAX_SVD_DIM}, got {m}")
    gram = J.T @ J
    evals, V = np.linalg.eigh(gram)
    order = np.argsort(evals)[::-1]
    evals, V = np.clip(evals[order], 0.0, None), V[:, order]
    return np.sqrt(evals), V


def pullback_logdet(singular_values: Sequence[float]) -> float:
    """``log det(J^T J) = sum_j 2 log sigma_j``; ``-inf`` when any sigma is zero."""
    s = np.asarray(singular_values, dtype=np.float64)
    if np.any(s <= 0):
        return -math.inf
    return float(np.sum(2.0 * np.log(s)))


def _report(z: np.ndarray, J: np.ndarray) -> JacobianReport:
    s, V = jacobian_svd(J)
    return JacobianReport(z, J, s, V, float(np.linalg.norm(J)), pullback_logdet(s))


def decoder_jacobian(model, z, method: str = "autodiff", fd_step: float = 1e-5) -> JacobianReport:
    """Jacobian of the flattened decoder output with respect to the latent point.

    ``autodiff`` stacks one copy of ``z`` per output coordinate and extracts
    every row with a single backward pass over a diagonal mask. ``central_fd``
    perturbs each latent axis by ``fd_step``.
    """
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    m = _latent_dim(model)
    if z.size != m:
        raise DimensionError(f"latent point has {z.size} entries, model expects {m}")
    if method == "autodiff":
        n = int(np.prod(model.arch.state_shape))
        Z = Tensor(np.tile(z, (n, 1)), requires_grad=True)
        with Tape() as tape:
            y = ops.reshape(model.decode(Z), (n, n))
            out = ops.sum(ops.mul(y, Tensor(np.eye(n))))
        backward(tape, out)
        J = Z.grad.copy()
    elif method == "central_fd":
        if not fd_step > 0:
            raise ConfigurationError("fd_step must be positive")
        E = np.eye(m) * fd_step
        plus = _decode_np(model, z + E).reshape(m, -1)
        minus = _decode_np(model, z - E).reshape(m, -1)
        J = ((plus - minus) / (2.0 * fd_step)).T
    else:
        raise ConfigurationError(f"unknown Jacobian method {method!r}")
    return _report(z, J)


@dataclass
class ProbeResult:
    z: np.ndarray
    eps: float
    deltas: np.ndarray  # (m, *state_shape)
    norms: np.ndarray

    @property
    def gains(self) -> np.ndarray:
        return self.norms / self.eps


def perturbation_probe(model, z, eps: float) -> ProbeResult:
    """``decode(z + eps e_j) - decode(z)`` for each latent axis j."""
    if not eps > 0:
        raise ConfigurationError("eps must be positive")
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    m = z.size
    outs = _decode_np(model, np.vstack([z[None], z + eps * np.eye(m)]))
    deltas = outs[1:] - outs[0]
    norms = np.sqrt(np.sum(deltas.reshape(m, -1) ** 2, axis=1))
    return ProbeResult(z, eps, deltas, norms)


@dataclass
class EncodedVsPropagated:
    encoded: JacobianReport
    propagated: JacobianReport
    mse_encoded: float
    mse_propagated: float
    u_encoded: np.ndarray
    u_propagated: np.ndarray

    def to_dict(self) -> dict:
        return {
            "encoded": self.encoded.to_dict(),
            "propagated": self.propagated.to_dict(),
            "mse_encoded": self.mse_encoded,
            "mse_propagated": self.mse_propagated,
        }


def compare_encoded_vs_propagated(model, record) -> EncodedVsPropagated:
    """Decoder geometry at the encoding of the true future state (z-tilde) and at
    the propagated latent (z-hat), plus the reconstruction error of each."""
    z_tilde = model.encode_mean(record.u_future)
    with no_grad():
        mu = model.encode_mean(record.u_now)
        z_hat = model.propagate(Tensor(mu[None]), record.zeta, record.tau).data[0]
    u_enc = _decode_np(model, z_tilde)[0]
    u_prop = _decode_np(model, z_hat)[0]
    return EncodedVsPropagated(
        decoder_jacobian(model, z_tilde),
        decoder_jacobian(model, z_hat),
        float(np.mean((u_enc - record.u_future) ** 2)),
        float(np.mean((u_prop - record.u_future) ** 2)),
        u_enc,
        u_prop,
    )


# ---------------------------------------------------------------- latent maps


@dataclass
class LatentMap:
    axes: tuple[np.ndarray, np.ndarray]
    sharpness: np.ndarray  # (len(axes[0]), len(axes[1]))
    peak_position: np.ndarray

    def monotone_fraction(self) -> float:
        """Best fraction, over the two latent axes, of grid lines along which
        sharpness is monotone."""

        def frac(a: np.ndarray) -> float:
            d = np.diff(a, axis=0)
            mono = np.all(d >= 0, axis=0) | np.all(d <= 0, axis=0)
            return float(np.mean(mono))

        return max(frac(self.sharpness), frac(self.sharpness.T))

    def rows(self):
        for i, a in enumerate(self.axes[0]):
            for j, b in enumerate(self.axes[1]):
                yield float(a), float(b), float(self.sharpness[i, j]), float(self.peak_position[i, j])


def latent_grid_map(
    model,
    lo: Sequence[float] = (-3.0, -3.0),
    hi: Sequence[float] = (3.0, 3.0),
    n: Sequence[int] | int = 21,
    dx: float | None = None,
    base: Sequence[float] | None = None,
) -> LatentMap:
    """Decode a rectangular grid over the first two latent axes.

    Sharpness is ``max_i |u[i+1] - u[i]| / dx`` and the peak position is
    ``argmax_i u[i] * dx``. Remaining latent coordinates sit at ``base``.
    """
    if len(model.arch.state_shape) != 1:
        raise ConfigurationError("latent_grid_map needs a 1D state")
    m = _latent_dim(model)
    if m < 2:
        raise ConfigurationError("latent_grid_map needs at least two latent dimensions")
    counts = (n, n) if isinstance(n, int) else tuple(n)
    if min(counts) < 2:
        raise ConfigurationError("grid needs at least 2 points per axis")
    width = model.arch.state_shape[0]
    dx = dx if dx is not None else 1.0 / (width - 1)
    a = np.linspace(lo[0], hi[0], counts[0])
    b = np.linspace(lo[1], hi[1], counts[1])
    aa, bb = np.meshgrid(a, b, indexing="ij")
    Z = np.tile(np.zeros(m) if base is None else np.asarray(base, dtype=float), (aa.size, 1))
    Z[:, 0], Z[:, 1] = aa.ravel(), bb.ravel()
    U = _decode_np(model, Z).reshape(aa.size, width)
    sharp = np.max(np.abs(np.diff(U, axis=1)), axis=1) / dx
    peak = np.argmax(U, axis=1) * dx
    return LatentMap((a, b), sharp.reshape(aa.shape), peak.reshape(aa.shape))


# ---------------------------------------------------------------- intrinsic dimension


@dataclass
class IntrinsicDimEstimate:
    k: int
    estimate: float
    per_point: np.ndarray


def knn_distances(points: np.ndarray, k: int, chunk: int = 1024) -> np.ndarray:
    """Sorted distances to the k nearest other points, by exhaustive search."""
    X = np.asarray(points, dtype=np.float64)
    N = X.shape[0]
    out = np.empty((N, k))
    for s in range(0, N, chunk):
        D = cdist(X[s : s + chunk], X)
        rows = np.arange(D.shape[0])
        D[rows, s + rows] = np.inf  # exclude self, keep duplicates at distance 0
        part = np.partition(D, k - 1, axis=1)[:, :k]
        out[s : s + chunk] = np.sort(part, axis=1)
    return out


def intrinsic_dimension_mle(points, k: int) -> IntrinsicDimEstimate:
    """Levina-Bickel estimate aggregated by the inverse of the mean inverse.

    Per point, ``m(x) = [ (1/(k-1)) sum_{j<k} log(T_k / T_j) ]^-1``. Neighbours
    at zero distance are dropped from that point's terms; points with no usable
    term are left out of the aggregate (NaN in ``per_point``).
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionError("points must be an (N, n) array")
    N = X.shape[0]
    if k < 2 or N <= k:
        raise ConfigurationError(f"need N > k >= 2, got N={N}, k={k}")
    T = knn_distances(X, k)
    Tk = T[:, -1:]
    Tj = T[:, :-1]
    valid = (Tj > 0) & (Tk > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(valid, np.log(np.where(valid, Tk / np.where(Tj > 0, Tj, 1.0), 1.0)), 0.0)
        count = valid.sum(axis=1)
        inv = logs.sum(axis=1) / count  # mean log ratio = 1 / m(x)
    inv = np.where(count > 0, inv, np.nan)
    usable = np.isfinite(inv) & (inv > 0)
    if not np.any(usable):
        raise ConfigurationError("no point has a usable neighbourhood (all duplicates?)")
    per_point = np.full(N, np.nan)
    per_point[usable] = 1.0 / inv[usable]
    estimate = 1.0 / float(np.mean(inv[usable]))
    return IntrinsicDimEstimate(k, estimate, per_point)
