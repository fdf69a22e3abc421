"""Observation operators in spectral (SVD) form, plus a smooth nonlinear operator.

Every linear operator is stored as A = U diag(s) V^T with orthonormal U, V
and strictly positive s; zero singular values are represented by omission,
so the null space is the orthogonal complement of the columns of V. This
makes pseudoinverse, range/null projections, and the coordinatewise
corrector algebra exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import DimensionError, RngStream

_SVD_TOL = 1e-12


class OperatorSpecError(ValueError):
    pass


@dataclass(frozen=True)
class LinearOperator:
    n: int
    m: int
    V: np.ndarray  # (n, r) right singular vectors
    U: np.ndarray  # (m, r) left singular vectors
    s: np.ndarray  # (r,) positive singular values
    kind: str = "dense"

    @property
    def r(self) -> int:
        return self.s.size

    def dense(self) -> np.ndarray:
        """Materialize A as an m x n matrix."""
        return (self.U * self.s) @ self.V.T


def apply(op: LinearOperator, x: np.ndarray) -> np.ndarray:
    """A x = U diag(s) V^T x, batched over the leading axis."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != op.n:
        raise DimensionError(f"expected last dim {op.n}, got {x.shape[-1]}")
    return ((x @ op.V) * op.s) @ op.U.T


def apply_adjoint(op: LinearOperator, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != op.m:
        raise DimensionError(f"expected last dim {op.m}, got {y.shape[-1]}")
    return ((y @ op.U) * op.s) @ op.V.T


def pinv_apply(op: LinearOperator, y: np.ndarray) -> np.ndarray:
    """Moore-Penrose pseudoinverse: A^+ y = V diag(1/s) U^T y."""
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != op.m:
        raise DimensionError(f"expected last dim {op.m}, got {y.shape[-1]}")
    return ((y @ op.U) / op.s) @ op.V.T


def project(op: LinearOperator, x: np.ndarray, which: str) -> np.ndarray:
    """Range (V V^T x) or null (x - V V^T x) component of x."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != op.n:
        raise DimensionError(f"expected last dim {op.n}, got {x.shape[-1]}")
    rng = (x @ op.V) @ op.V.T
    if which == "range":
        return rng
    if which == "null":
        return x - rng
    raise ValueError(f"which must be 'range' or 'null', got {which!r}")


def observe(op, x, sigma_y: float, stream: RngStream | None = None) -> np.ndarray:
    """y = A(x) + sigma_y * n with a dedicated noise stream; exact when sigma_y = 0."""
    if isinstance(op, NonlinearOperator):
        y = nl_apply(op, x)
    else:
        y = apply(op, x)
    if sigma_y > 0:
        y = y + sigma_y * stream.standard_normal(y.shape)
    return y


@dataclass(frozen=True)
class Observation:
    y: np.ndarray
    op: object  # LinearOperator or NonlinearOperator
    sigma_y: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.y)):
            raise ValueError("observation contains non-finite entries")
        if self.sigma_y < 0:
            raise ValueError("sigma_y must be nonnegative")

    @property
    def is_linear(self) -> bool:
        return isinstance(self.op, LinearOperator)


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def _hadamard(n: int) -> np.ndarray:
    """Sylvester Walsh-Hadamard matrix; H^T H = n I exactly in integers."""
    if n & (n - 1) != 0 or n < 1:
        raise OperatorSpecError(f"hadamard size {n} is not a power of two")
    H = np.array([[1]], dtype=np.int64)
    while H.shape[0] < n:
        H = np.block([[H, H], [H, -H]])
    return H


def _circulant_eigensystem(kernel_full: np.ndarray):
    """Real orthonormal eigenbasis of a symmetric circulant.

    kernel_full is the length-n first column c of the circulant. Symmetry
    (c[j] == c[n-j]) makes all eigenvalues real and the cosine/sine basis an
    eigenbasis.
    """
    n = kernel_full.size
    j = np.arange(n)
    lams = np.empty(n)
    basis = np.empty((n, n))
    col = 0
    for freq in range(n // 2 + 1):
        ang = 2.0 * math.pi * freq * j / n
        lam = float(np.sum(kernel_full * np.cos(2.0 * math.pi * freq * np.arange(n) / n)))
        if freq == 0:
            basis[:, col] = 1.0 / math.sqrt(n)
            lams[col] = lam
            col += 1
        elif 2 * freq == n:
            basis[:, col] = np.cos(ang) / math.sqrt(n)  # alternating +-1/sqrt(n)
            lams[col] = lam
            col += 1
        else:
            basis[:, col] = np.cos(ang) * math.sqrt(2.0 / n)
            lams[col] = lam
            basis[:, col + 1] = np.sin(ang) * math.sqrt(2.0 / n)
            lams[col + 1] = lam
            col += 2
    return lams, basis


def mask_operator(n: int, keep_indices) -> LinearOperator:
    keep = np.asarray(sorted(keep_indices), dtype=int)
    if keep.size == 0:
        raise OperatorSpecError("mask must keep at least one coordinate")
    if keep.min() < 0 or keep.max() >= n:
        raise OperatorSpecError("mask indices out of range")
    r = keep.size
    V = np.zeros((n, r))
    V[keep, np.arange(r)] = 1.0
    return LinearOperator(n=n, m=r, V=V, U=np.eye(r), s=np.ones(r), kind="mask")


def random_mask_operator(n: int, keep_ratio: float, seed: int) -> LinearOperator:
    """Random mask keeping round(keep_ratio * n) coordinates, seeded."""
    k = max(1, round(keep_ratio * n))
    perm = RngStream(seed, stream_id=701).permutation(n)
    return mask_operator(n, perm[:k])


def avgpool_operator(n: int, factor: int) -> LinearOperator:
    if n % factor != 0:
        raise OperatorSpecError(f"n={n} not divisible by pooling factor {factor}")
    m = n // factor
    V = np.zeros((n, m))
    for k in range(m):
        V[k * factor : (k + 1) * factor, k] = 1.0 / math.sqrt(factor)
    s = np.full(m, 1.0 / math.sqrt(factor))
    return LinearOperator(n=n, m=m, V=V, U=np.eye(m), s=s, kind="avgpool")


def blur_operator(n: int, kernel) -> LinearOperator:
    """Symmetric circular blur; diagonalized in the real cosine/sine basis."""
    kernel = np.asarray(kernel, dtype=float)
    if kernel.size % 2 != 1:
        raise OperatorSpecError("blur kernel length must be odd")
    if not np.allclose(kernel, kernel[::-1]):
        raise OperatorSpecError("blur kernel must be symmetric about its center")
    if kernel.size > n:
        raise OperatorSpecError("kernel longer than signal")
    half = kernel.size // 2
    col = np.zeros(n)
    for offset in range(-half, half + 1):
        col[offset % n] += kernel[half + offset]
    lams, basis = _circulant_eigensystem(col)
    keep = np.abs(lams) > _SVD_TOL
    V = basis[:, keep]
    s = np.abs(lams[keep])
    U = basis[:, keep] * np.sign(lams[keep])
    return LinearOperator(n=n, m=n, V=V, U=U, s=s, kind="blur")


def gaussian_kernel(width: int, sigma: float) -> np.ndarray:
    """Odd-length normalized Gaussian kernel for the blur operator."""
    if width % 2 != 1:
        raise OperatorSpecError("kernel width must be odd")
    x = np.arange(width) - width // 2
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def hadamard_operator(n: int, keep_ratio: float, seed: int) -> LinearOperator:
    """Selected rows of the normalized Walsh-Hadamard matrix H_n / sqrt(n)."""
    H = _hadamard(n)
    k = max(1, round(keep_ratio * n))
    rows = np.sort(RngStream(seed, stream_id=702).permutation(n)[:k])
    V = (H[rows].T / math.sqrt(n)).astype(float)
    return LinearOperator(n=n, m=k, V=V, U=np.eye(k), s=np.ones(k), kind="hadamard")


def dense_operator(matrix) -> LinearOperator:
    A = np.asarray(matrix, dtype=float)
    m, n = A.shape
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    keep = s > _SVD_TOL
    return LinearOperator(n=n, m=m, V=Vt[keep].T, U=U[:, keep], s=s[keep], kind="dense")


def build_operator(spec: dict) -> LinearOperator:
    """Construct an operator from a config-style spec dict (see harness docs)."""
    kind = spec.get("kind")
    n = spec.get("n")
    if kind == "mask":
        if "keep_indices" in spec:
            return mask_operator(n, spec["keep_indices"])
        return random_mask_operator(n, spec["keep_ratio"], spec.get("seed", 0))
    if kind == "avgpool":
        return avgpool_operator(n, spec["factor"])
    if kind == "blur":
        if "kernel" in spec:
            kernel = spec["kernel"]
        else:
            kernel = gaussian_kernel(spec.get("width", 9), spec["sigma"])
        return blur_operator(n, kernel)
    if kind == "hadamard":
        return hadamard_operator(n, spec["keep_ratio"], spec.get("seed", 0))
    if kind == "dense":
        return dense_operator(spec["matrix"])
    raise OperatorSpecError(f"unknown operator kind {kind!r}")


# ---------------------------------------------------------------------------
# nonlinear operator: y = tanh(c * (K (*) x)) with a symmetric circular kernel
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NonlinearOperator:
    kernel: np.ndarray
    scale: float

    def __post_init__(self):
        k = np.asarray(self.kernel, dtype=float)
        if k.size % 2 != 1:
            raise OperatorSpecError("kernel length must be odd")
        if not np.allclose(k, k[::-1]):
            raise OperatorSpecError("kernel must be symmetric")
        if abs(k.sum() - 1.0) > 1e-12:
            raise OperatorSpecError("kernel must be normalized to sum 1")
        if self.scale <= 0:
            raise OperatorSpecError("scale must be positive")


def _circ_conv(kernel: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Circular convolution along the last axis; kernel centered."""
    n = x.shape[-1]
    half = kernel.size // 2
    out = np.zeros_like(x, dtype=float)
    for offset in range(-half, half + 1):
        out += kernel[half + offset] * np.roll(x, -offset, axis=-1)
    return out


def nl_apply(nlop: NonlinearOperator, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.tanh(nlop.scale * _circ_conv(np.asarray(nlop.kernel), x))


def nl_vjp(nlop: NonlinearOperator, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """v^T (d nl_apply/dx); the symmetric kernel makes correlation = convolution."""
    x = np.asarray(x, dtype=float)
    y = nl_apply(nlop, x)
    return _circ_conv(np.asarray(nlop.kernel), nlop.scale * (1.0 - y * y) * np.asarray(v))
