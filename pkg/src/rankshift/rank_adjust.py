"""Run-time rank inflation and deflation, plus the rank/gap bound checkers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ParameterError, ShapeError, StateError
from .layers import DECOMPS, Layer, Network
from .linalg import cp_als, hosvd_conv, numerical_rank, spectral_norm, truncated_svd

DEFLATE_POLICIES = ("zero-b", "random", "zero")


@dataclass(frozen=True)
class DeflationInit:
    """How fresh adaptor factors are drawn at deflation.

    ``zero-b``: ``B`` zero, every other factor random. ``random``: all
    random. ``zero``: ``A`` and ``B`` zero (inner Tucker/CP factors stay
    random). Random entries are uniform on ``+-scale / sqrt(fan_in)``.
    """

    policy: str = "zero-b"
    scale: float = 1.0

    def __post_init__(self):
        if self.policy not in DEFLATE_POLICIES:
            raise ParameterError(f"unknown deflation policy {self.policy!r}")
        if not self.scale > 0:
            raise ParameterError("deflation scale must be positive")


def factor_shapes(layer: Layer, decomp: str, k: int) -> dict[str, tuple[int, ...]]:
    if layer.kind == "dense":
        m, n = layer.shape
        return {
            "svd": {"A": (m, k), "B": (n, k)},
            "tucker": {"A": (m, k), "Core": (k, k), "B": (k, n)},
            "cp": {"A": (m, k), "C1": (k, k), "C2": (k, k), "B": (k, n)},
        }[decomp]
    h, w, C, F = layer.shape
    return {
        "svd": {"A": (h, w, C, k), "B": (1, 1, k, F)},
        "tucker": {"A": (1, 1, C, k), "Core": (h, w, k, k), "B": (1, 1, k, F)},
        "cp": {"A": (1, 1, C, k), "C1": (h, 1, k, k), "C2": (1, w, k, k), "B": (1, 1, k, F)},
    }[decomp]


def _fan_in(name: str, shape: tuple[int, ...], layer: Layer) -> int:
    if layer.kind == "dense":
        return layer.shape[0] if name == "A" else min(shape)
    return int(np.prod(shape[:-1]))


def _check_rank(layer: Layer, k: int) -> None:
    if not isinstance(k, (int, np.integer)) or not 1 <= k < layer.max_rank:
        raise ParameterError(f"rank k={k} must satisfy 1 <= k < {layer.max_rank} for {layer.shape}")


def reparameterize(layer: Layer, k: int, decomp: str = "svd") -> Layer:
    """Replace a full-rank layer by rank-``k`` factors of its weight (zero base)."""
    if layer.mode != "full":
        raise StateError("reparameterize expects a full-rank layer")
    if decomp not in DECOMPS:
        raise ParameterError(f"unknown decomposition {decomp!r}")
    _check_rank(layer, k)
    W = layer.params["W"]
    K = W[None, None] if layer.kind == "dense" else W
    if decomp == "svd":
        A, B = truncated_svd(K.reshape(-1, K.shape[-1]), k)
        factors = {"A": A.reshape(*K.shape[:3], k), "B": B.T.reshape(1, 1, k, K.shape[-1])}
    elif decomp == "tucker":
        t = hosvd_conv(K, k)
        factors = {"A": t.A, "Core": t.Core, "B": t.B}
    else:
        c = cp_als(K, k)
        factors = {"A": c.A, "C1": c.C1, "C2": c.C2, "B": c.B}
    out = Layer(layer.kind, layer.shape, layer.activation, "lowrank", decomp,
                params={}, base=None)
    for name, Kf in factors.items():
        out.params[name] = np.ascontiguousarray(out._from_kernel(name, Kf))
    out.params["b"] = layer.params["b"].copy()
    return out


def inflate(layer: Layer) -> Layer:
    """Collapse ``W0 + reconstruction(factors)`` into one trainable full-rank weight."""
    if layer.mode != "lowrank":
        raise StateError("inflate expects a low-rank layer")
    K = layer.effective_kernel()
    W = K[0, 0] if layer.kind == "dense" else K
    return Layer(layer.kind, layer.shape, layer.activation, "full", None,
                 params={"W": np.array(W), "b": layer.params["b"].copy()})


def deflate(layer: Layer, k: int, init: DeflationInit | None = None,
            rng: np.random.Generator | None = None, decomp: str = "svd") -> Layer:
    """Freeze the current weight as ``Wf`` and attach a fresh rank-``k`` adaptor."""
    if layer.mode != "full":
        raise StateError("deflate expects a full-rank layer")
    if decomp not in DECOMPS:
        raise ParameterError(f"unknown decomposition {decomp!r}")
    _check_rank(layer, k)
    init = init or DeflationInit()
    rng = rng if rng is not None else np.random.default_rng(0)
    zeroed = {"zero-b": {"B"}, "random": set(), "zero": {"A", "B"}}[init.policy]
    params = {}
    for name, shape in factor_shapes(layer, decomp, k).items():
        if name in zeroed:
            params[name] = np.zeros(shape)
        else:
            bound = init.scale / np.sqrt(_fan_in(name, shape, layer))
            params[name] = rng.uniform(-bound, bound, size=shape)
    params["b"] = layer.params["b"].copy()
    return Layer(layer.kind, layer.shape, layer.activation, "lowrank", decomp,
                 params=params, base=layer.params["W"].copy())


def inflate_network(net: Network) -> list[int]:
    """Inflate every low-rank layer in place; returns the touched indices."""
    touched = []
    for i, layer in enumerate(net.layers):
        if layer.mode == "lowrank":
            net.layers[i] = inflate(layer)
            touched.append(i)
    if touched:
        net.touch()
    return touched


def deflate_network(net: Network, ranks: dict[int, int], init: DeflationInit,
                    rng: np.random.Generator, decomp: str = "svd") -> list[int]:
    touched = []
    for i, k in sorted(ranks.items()):
        if net.layers[i].mode == "full":
            net.layers[i] = deflate(net.layers[i], k, init, rng, decomp)
            touched.append(i)
    if touched:
        net.touch()
    return touched


def factor_pair(layer: Layer) -> tuple[np.ndarray, np.ndarray]:
    """Matrices ``L``, ``R`` (k columns each) whose product ``L R^T`` is the
    ``(h*w*C) x F`` unfolding of the layer's trainable reconstruction."""
    if layer.mode != "lowrank":
        raise StateError("factor_pair expects a low-rank layer")
    ks = layer.stage_kernels()
    k = layer.rank
    if layer.decomp == "svd":
        L = ks[0]
    elif layer.decomp == "tucker":
        L = np.einsum("cp,yxpq->yxcq", ks[0][0, 0], ks[1], optimize=True)
    else:
        L = np.einsum("cp,ypq,xqr->yxcr", ks[0][0, 0], ks[1][:, 0], ks[2][0], optimize=True)
    return L.reshape(-1, k), ks[-1][0, 0].T


class Prop1Result(NamedTuple):
    r: int
    rank_W: int
    holds: bool


def prop1_bounds_check(W0, A, B, rel_tol: float | None = None) -> Prop1Result:
    """Check ``max(r-k, 0) <= rank(W0 + A B^T) <= min(r+k, min(m, n))``
    where ``r`` is the numerical rank of ``W0``."""
    W0 = np.asarray(W0, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[0] != W0.shape[0] or B.shape[0] != W0.shape[1]:
        raise ShapeError(f"need A: {W0.shape[0]} x k and B: {W0.shape[1]} x k, got {A.shape}, {B.shape}")
    if A.shape[1] != B.shape[1]:
        raise ShapeError(f"A has {A.shape[1]} columns, B has {B.shape[1]}")
    k = A.shape[1]
    r = numerical_rank(W0, rel_tol)
    rank_W = numerical_rank(W0 + A @ B.T, rel_tol)
    holds = max(r - k, 0) <= rank_W <= min(r + k, min(W0.shape))
    return Prop1Result(r, rank_W, bool(holds))


class Prop2Result(NamedTuple):
    d: float
    bound: float


def prop2_gap(A, B, grad, eta: float) -> Prop2Result:
    """Gap between a full-rank gradient step and the induced low-rank step.

    With ``G = grad``: ``X = G B B^T``, ``Y = A A^T G``, ``Z = G B A^T G``,
    ``d = ||G - (-X - Y + eta Z)||_F`` and
    ``bound = ||G||_F (1 + ||A||_2^2 + ||B||_2^2) + eta ||G||_F ||G||_2 ||A||_2 ||B||_2``.
    """
    return prop2_gaps(A, B, grad, [eta])[0]


def prop2_gaps(A, B, grad, etas) -> list[Prop2Result]:
    """``prop2_gap`` over several step sizes, sharing the spectral norms."""
    if not all(eta > 0 for eta in etas):
        raise ParameterError("eta must be positive")
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    G = np.asarray(grad, dtype=np.float64)
    if A.shape[0] != G.shape[0] or B.shape[0] != G.shape[1] or A.shape[1] != B.shape[1]:
        raise ShapeError(f"inconsistent shapes A{A.shape} B{B.shape} grad{G.shape}")
    X = G @ B @ B.T
    Y = A @ (A.T @ G)
    Z = G @ B @ (A.T @ G)
    g_f = float(np.linalg.norm(G))
    a2, b2, g2 = spectral_norm(A), spectral_norm(B), spectral_norm(G)
    out = []
    for eta in etas:
        d = float(np.linalg.norm(G - (-X - Y + eta * Z)))
        bound = g_f * (1.0 + a2 * a2 + b2 * b2) + eta * g_f * g2 * a2 * b2
        out.append(Prop2Result(d, bound))
    return out
