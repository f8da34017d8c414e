"""Dense factorizations used throughout the package.

Everything here works on plain ``float64`` numpy arrays: a "DenseTensor" is an
ndarray with one to four axes and finite entries. The SVD is a one-sided
Jacobi (Hestenes) iteration with a round-robin pairing so that every sweep
rotates disjoint column pairs in one vectorized step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DomainError, ParameterError, ShapeError

_EPS = np.finfo(np.float64).eps
_MAX_SWEEPS = 80


def as_tensor(x, ndim: int | tuple[int, ...] | None = None, name: str = "tensor") -> np.ndarray:
    """Validate and convert ``x`` into a contiguous float64 array."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    allowed = (ndim,) if isinstance(ndim, int) else ndim
    if allowed is not None and arr.ndim not in allowed:
        raise ShapeError(f"{name} must have {allowed} axes, got shape {arr.shape}")
    if not 1 <= arr.ndim <= 4:
        raise ShapeError(f"{name} must have 1-4 axes, got {arr.ndim}")
    if arr.size == 0 or min(arr.shape) < 1:
        raise ShapeError(f"{name} has an empty extent: {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains NaN or Inf")
    return arr


class SvdResult(NamedTuple):
    U: np.ndarray  # m x p, orthonormal columns
    S: np.ndarray  # p, descending
    V: np.ndarray  # n x p, orthonormal columns


def _complete_basis(U: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace columns where ``good`` is False with an orthonormal completion."""
    m, p = U.shape
    basis = [U[:, j] for j in range(p) if good[j]]
    out = U.copy()
    candidates = iter(np.eye(m))
    for j in range(p):
        if good[j]:
            continue
        for e in candidates:
            v = e.copy()
            for _ in range(2):
                for b in basis:
                    v -= (b @ v) * b
            nv = np.linalg.norm(v)
            if nv > 1e-6:
                v /= nv
                basis.append(v)
                out[:, j] = v
                break
    return out


def _jacobi(G: np.ndarray, with_v: bool = True) -> tuple[np.ndarray, np.ndarray | None]:
    """Orthogonalize the columns of ``G`` (m >= n) by plane rotations.

    Columns are laid out as two halves; slot ``i`` is paired with slot
    ``i + half`` and a circle-method permutation after each round visits
    every pair once per sweep.
    """
    m, n = G.shape
    N = n + (n % 2)
    rows = m + (N if with_v else 0)
    X = np.zeros((rows, N))
    X[:m, :n] = G
    if with_v:
        X[m:, :] = np.eye(N)
    ids = np.arange(N)
    half = N // 2
    if half > 1:
        perm = np.r_[0, half, np.arange(1, half - 1), np.arange(half + 1, N), half - 1]
    else:
        perm = np.arange(N)
    tol = _EPS * m
    for _ in range(_MAX_SWEEPS):
        rotated = False
        for _ in range(N - 1):
            Xp, Xq = X[:, :half], X[:, half:]
            Gp, Gq = Xp[:m], Xq[:m]
            alpha = np.einsum("ij,ij->j", Gp, Gp)
            beta = np.einsum("ij,ij->j", Gq, Gq)
            gamma = np.einsum("ij,ij->j", Gp, Gq)
            hit = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if hit.any():
                rotated = True
                # |zeta| may overflow for tiny gamma; t -> 0 is the right limit
                with np.errstate(over="ignore", divide="ignore"):
                    zeta = (beta - alpha) / (2.0 * np.where(hit, gamma, 1.0))
                    t = np.copysign(1.0, zeta) / (np.abs(zeta) + np.hypot(1.0, zeta))
                t[~hit] = 0.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * Xp - s * Xq
                Xq *= c
                Xq += s * Xp
                Xp[...] = new_p
            X = X[:, perm]
            ids = ids[perm]
        if not rotated:
            break
    keep = ids < n
    G_out = X[:m, keep]
    col_ids = ids[keep]
    if not with_v:
        return G_out, None
    V = X[m:m + n, keep]
    order = np.argsort(col_ids, kind="stable")
    return G_out[:, order], V[:, order]


def svd(W, compute_uv: bool = True) -> SvdResult:
    """Thin SVD ``W = U diag(S) V^T`` with ``p = min(m, n)`` triplets.

    With ``compute_uv=False`` only ``S`` is filled; ``U`` and ``V`` are None.
    """
    W = as_tensor(W, 2, "W")
    m, n = W.shape
    if m < n:
        U, S, V = svd(W.T, compute_uv)
        return SvdResult(V, S, U)
    G, V = _jacobi(W, with_v=compute_uv)
    S = np.linalg.norm(G, axis=0)
    order = np.argsort(-S, kind="stable")
    S = S[order]
    if not compute_uv:
        return SvdResult(None, S, None)
    G, V = G[:, order], V[:, order]
    good = S > np.finfo(np.float64).tiny * 1e16
    U = np.zeros_like(G)
    U[:, good] = G[:, good] / S[good]
    if not good.all():
        U = _complete_basis(U, good)
    return SvdResult(U, S, V)


def singular_values(W) -> np.ndarray:
    return svd(W, compute_uv=False).S


def truncated_svd(W, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Best rank-``k`` factors ``A`` (m x k), ``B`` (n x k) with ``A @ B.T ~ W``.

    The singular values are split evenly: ``A = U_k sqrt(S_k)``, ``B = V_k sqrt(S_k)``.
    """
    W = as_tensor(W, 2, "W")
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= min(W.shape):
        raise ParameterError(f"k must be in [1, {min(W.shape)}], got {k}")
    U, S, V = svd(W)
    root = np.sqrt(S[:k])
    return U[:, :k] * root, V[:, :k] * root


def default_rel_tol(shape) -> float:
    return 1e-8 * max(shape)


def numerical_rank(W, rel_tol: float | None = None) -> int:
    """Count singular values above ``rel_tol * sigma_max``."""
    W = as_tensor(W, 2, "W")
    if rel_tol is None:
        rel_tol = default_rel_tol(W.shape)
    if not 0.0 < rel_tol < 1.0:
        raise ParameterError(f"rel_tol must lie in (0, 1), got {rel_tol}")
    S = singular_values(W)
    if S[0] == 0.0:
        return 0
    return int(np.count_nonzero(S > rel_tol * S[0]))


def spectral_norm(W) -> float:
    W = np.asarray(W, dtype=np.float64)
    if W.size == 0:
        return 0.0
    return float(singular_values(W)[0])


def unfold(T: np.ndarray, mode: int) -> np.ndarray:
    """Mode-``mode`` unfolding: rows indexed by that axis."""
    return np.moveaxis(T, mode, 0).reshape(T.shape[mode], -1)


@dataclass
class TuckerFactors:
    """Chained 1x1 -> h x w -> 1x1 convolution factors of an h x w x C x F kernel."""

    A: np.ndarray  # 1 x 1 x C x k
    Core: np.ndarray  # h x w x k x k
    B: np.ndarray  # 1 x 1 x k x F

    def reconstruct(self) -> np.ndarray:
        return np.einsum("cp,yxpq,qf->yxcf", self.A[0, 0], self.Core, self.B[0, 0], optimize=True)


@dataclass
class CpFactors:
    """Chained 1x1 -> h x 1 -> 1 x w -> 1x1 convolution factors."""

    A: np.ndarray  # 1 x 1 x C x k
    C1: np.ndarray  # h x 1 x k x k
    C2: np.ndarray  # 1 x w x k x k
    B: np.ndarray  # 1 x 1 x k x F
    history: list[float] = field(default_factory=list, compare=False)

    def reconstruct(self) -> np.ndarray:
        return np.einsum(
            "cp,ypq,xqr,rf->yxcf",
            self.A[0, 0], self.C1[:, 0], self.C2[0], self.B[0, 0], optimize=True,
        )


def _check_kernel(W, k) -> np.ndarray:
    W = as_tensor(W, 4, "kernel")
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise ParameterError(f"k must be a positive integer, got {k}")
    return W


def hosvd_conv(W, k: int) -> TuckerFactors:
    """Tucker-2 HOSVD of a conv kernel along its channel modes.

    Spatial modes are kept whole; the input- and output-channel unfoldings
    are truncated to their ``k`` leading left singular vectors.
    """
    W = _check_kernel(W, k)
    h, w, C, F = W.shape
    if k > min(C, F):
        raise ParameterError(f"k={k} exceeds min(C, F)={min(C, F)}")
    Uc = svd(unfold(W, 2)).U[:, :k]
    Uf = svd(unfold(W, 3)).U[:, :k]
    core = np.einsum("yxcf,cp,fq->yxpq", W, Uc, Uf, optimize=True)
    return TuckerFactors(
        A=Uc.reshape(1, 1, C, k).copy(),
        Core=core,
        B=Uf.T.reshape(1, 1, k, F).copy(),
    )


def _khatri_rao(mats: list[np.ndarray]) -> np.ndarray:
    out = mats[0]
    for M in mats[1:]:
        out = np.einsum("ir,jr->ijr", out, M).reshape(-1, M.shape[1])
    return out


def _cp_init(W: np.ndarray, k: int, rng: np.random.Generator | None) -> list[np.ndarray]:
    factors = []
    for mode, size in enumerate(W.shape):
        if rng is not None:
            factors.append(rng.standard_normal((size, k)))
            continue
        U = svd(unfold(W, mode)).U
        M = np.zeros((size, k))
        take = min(k, U.shape[1])
        M[:, :take] = U[:, :take]
        if take < k:
            # deterministic filler for ranks beyond the mode size
            filler = np.random.default_rng(size * 7919 + k).standard_normal((size, k - take))
            M[:, take:] = filler / np.sqrt(size)
        factors.append(M)
    return factors


def cp_als(
    W,
    k: int,
    max_iters: int = 500,
    tol: float = 1e-10,
    seed: int | None = None,
    ridge: float = 1e-10,
) -> CpFactors:
    """Rank-``k`` CP decomposition of an h x w x C x F kernel by alternating least squares.

    Each sweep solves one regularized normal-equation system per mode. The
    rank-one components are packed into the conv factor shapes: the spatial
    factors become the diagonals of ``C1`` / ``C2`` and the component
    weights are absorbed into ``B``. ``seed=None`` starts from the leading
    singular vectors of every unfolding; an integer seed starts from
    Gaussian factors instead.
    """
    W = _check_kernel(W, k)
    if max_iters < 1:
        raise ParameterError(f"max_iters must be >= 1, got {max_iters}")
    h, w, C, F = W.shape
    rng = None if seed is None else np.random.default_rng(seed)
    factors = _cp_init(W, k, rng)
    norm_w = np.linalg.norm(W)
    unfoldings = [unfold(W, mode) for mode in range(4)]
    history: list[float] = []
    prev_fit = None
    for _ in range(max_iters):
        for mode in range(4):
            others = [factors[j] for j in range(4) if j != mode]
            gram = np.ones((k, k))
            for M in others:
                gram *= M.T @ M
            kr = _khatri_rao(others)
            rhs = unfoldings[mode] @ kr
            factors[mode] = np.linalg.solve(gram + ridge * np.eye(k), rhs.T).T
        err = np.linalg.norm(_cp_full(factors) - W)
        history.append(float(err))
        fit = 1.0 - err / norm_w if norm_w > 0 else 1.0
        if prev_fit is not None and abs(fit - prev_fit) < tol:
            break
        prev_fit = fit
    Hf, Wf, Cf, Ff = factors
    eye = np.eye(k)
    C1 = (Hf[:, :, None] * eye)[:, None]
    C2 = (Wf[:, :, None] * eye)[None]
    return CpFactors(
        A=Cf.reshape(1, 1, C, k).copy(),
        C1=C1,
        C2=C2,
        B=Ff.T.reshape(1, 1, k, F).copy(),
        history=history,
    )


def _cp_full(factors: list[np.ndarray]) -> np.ndarray:
    return np.einsum("ar,br,cr,dr->abcd", *factors, optimize=True)
