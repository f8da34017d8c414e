"""Dense and convolution layers in full-rank or low-rank mode.

A dense layer of shape ``m x n`` is handled internally as a ``1 x 1 x m x n``
convolution over a ``1 x 1`` image, so every mode reduces to a chain of
convolutions and one backward routine serves all of them. Low-rank layers
never materialize ``W0 + reconstruction``: the forward pass runs the
factor chain and adds the frozen base path separately.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ParameterError, ShapeError, StateError

DECOMPS = ("svd", "tucker", "cp")
ACTIVATIONS = ("relu", "identity")
LOSSES = ("ce", "mse")

_STAGES = {
    "svd": ("A", "B"),
    "tucker": ("A", "Core", "B"),
    "cp": ("A", "C1", "C2", "B"),
}


# -- convolution primitives (stride 1, zero "same" padding, cross-correlation) --

def _pad_widths(kh: int, kw: int):
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    return ((0, 0), (ph, kh - 1 - ph), (pw, kw - 1 - pw), (0, 0))


def im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    n, H, W, C = x.shape
    if kh == 1 and kw == 1:
        return x.reshape(n * H * W, C)
    xp = np.pad(x, _pad_widths(kh, kw))
    cols = np.empty((n, H, W, kh, kw, C))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + H, j:j + W, :]
    return cols.reshape(n * H * W, kh * kw * C)


def col2im(dcols: np.ndarray, x_shape: tuple[int, ...], kh: int, kw: int) -> np.ndarray:
    n, H, W, C = x_shape
    if kh == 1 and kw == 1:
        return dcols.reshape(x_shape)
    (_, _), (ph, ph2), (pw, pw2), _ = _pad_widths(kh, kw)
    dxp = np.zeros((n, H + ph + ph2, W + pw + pw2, C))
    d = dcols.reshape(n, H, W, kh, kw, C)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + H, j:j + W, :] += d[:, :, :, i, j, :]
    return dxp[:, ph:ph + H, pw:pw + W, :]


def conv2d(x: np.ndarray, K: np.ndarray) -> np.ndarray:
    kh, kw, C, F = K.shape
    n, H, W, _ = x.shape
    return (im2col(x, kh, kw) @ K.reshape(-1, F)).reshape(n, H, W, F)


# -- factor algebra in kernel form ---------------------------------------------

def compose_kernels(decomp: str, kernels: list[np.ndarray]) -> np.ndarray:
    """Single kernel equal to running the factor chain as successive convolutions."""
    if decomp == "svd":
        A, B = kernels
        return np.einsum("yxcp,pf->yxcf", A, B[0, 0], optimize=True)
    if decomp == "tucker":
        A, Core, B = kernels
        return np.einsum("cp,yxpq,qf->yxcf", A[0, 0], Core, B[0, 0], optimize=True)
    if decomp == "cp":
        A, C1, C2, B = kernels
        return np.einsum("cp,ypq,xqr,rf->yxcf", A[0, 0], C1[:, 0], C2[0], B[0, 0], optimize=True)
    raise ParameterError(f"unknown decomposition {decomp!r}")


def compose_kernels_adjoint(decomp: str, kernels: list[np.ndarray], G: np.ndarray) -> list[np.ndarray]:
    """Pull a gradient on the composed kernel back onto each factor kernel."""
    if decomp == "svd":
        A, B = kernels
        dA = np.einsum("yxcf,pf->yxcp", G, B[0, 0], optimize=True)
        dB = np.einsum("yxcp,yxcf->pf", A, G, optimize=True)[None, None]
        return [dA, dB]
    if decomp == "tucker":
        A, Core, B = (kernels[0][0, 0], kernels[1], kernels[2][0, 0])
        dA = np.einsum("yxcf,yxpq,qf->cp", G, Core, B, optimize=True)
        dCore = np.einsum("cp,yxcf,qf->yxpq", A, G, B, optimize=True)
        dB = np.einsum("cp,yxpq,yxcf->qf", A, Core, G, optimize=True)
        return [dA[None, None], dCore, dB[None, None]]
    if decomp == "cp":
        A, C1, C2, B = kernels[0][0, 0], kernels[1][:, 0], kernels[2][0], kernels[3][0, 0]
        dA = np.einsum("yxcf,ypq,xqr,rf->cp", G, C1, C2, B, optimize=True)
        dC1 = np.einsum("cp,yxcf,xqr,rf->ypq", A, G, C2, B, optimize=True)
        dC2 = np.einsum("cp,ypq,yxcf,rf->xqr", A, C1, G, B, optimize=True)
        dB = np.einsum("cp,ypq,xqr,yxcf->rf", A, C1, C2, G, optimize=True)
        return [dA[None, None], dC1[:, None], dC2[None], dB[None, None]]
    raise ParameterError(f"unknown decomposition {decomp!r}")


# -- layers ---------------------------------------------------------------------

@dataclass(eq=False)
class Layer:
    """One weight layer.

    ``kind`` is ``"dense"`` (``shape = (m, n)``) or ``"conv"``
    (``shape = (h, w, C, F)``). In ``"full"`` mode ``params`` holds ``W``
    and ``b``; in ``"lowrank"`` mode it holds the factors of ``decomp`` and
    ``b``, and ``base`` is the frozen ``W0`` (``None`` encodes a zero base).

    Factor shapes for dense layers: svd ``A`` m x k, ``B`` n x k; tucker
    ``A`` m x k, ``Core`` k x k, ``B`` k x n; cp ``A`` m x k, ``C1`` / ``C2``
    k x k, ``B`` k x n. Conv layers use the 4-D shapes of their stages.
    """

    kind: str
    shape: tuple[int, ...]
    activation: str = "relu"
    mode: str = "full"
    decomp: str | None = None
    params: dict[str, np.ndarray] = field(default_factory=dict)
    base: np.ndarray | None = None

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if self.kind not in ("dense", "conv"):
            raise ParameterError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.activation!r}")
        if len(self.shape) != (2 if self.kind == "dense" else 4):
            raise ShapeError(f"{self.kind} layer shape {self.shape} has wrong arity")

    @property
    def kernel_shape(self) -> tuple[int, int, int, int]:
        if self.kind == "dense":
            return (1, 1, *self.shape)
        return self.shape

    @property
    def fan_out(self) -> int:
        return self.shape[-1]

    @property
    def max_rank(self) -> int:
        """Largest rank a factorized form of this layer may use (exclusive cap)."""
        _, _, C, F = self.kernel_shape
        return min(C, F)

    @property
    def rank(self) -> int | None:
        if self.mode != "lowrank":
            return None
        A = self.params["A"]
        return A.shape[-1]

    def trainable_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> Layer:
        return Layer(
            kind=self.kind, shape=self.shape, activation=self.activation, mode=self.mode,
            decomp=self.decomp, params={k: v.copy() for k, v in self.params.items()},
            base=None if self.base is None else self.base.copy(),
        )

    # factor <-> kernel views

    def _to_kernel(self, name: str, P: np.ndarray) -> np.ndarray:
        if self.kind == "conv":
            return P
        if self.mode == "lowrank" and self.decomp == "svd" and name == "B":
            return P.T[None, None]
        return P[None, None]

    def _from_kernel(self, name: str, dK: np.ndarray) -> np.ndarray:
        if self.kind == "conv":
            return dK
        if self.mode == "lowrank" and self.decomp == "svd" and name == "B":
            return dK[0, 0].T
        return dK[0, 0]

    def stage_names(self) -> tuple[str, ...]:
        if self.mode == "full":
            return ("W",)
        return _STAGES[self.decomp]

    def stage_kernels(self) -> list[np.ndarray]:
        return [self._to_kernel(n, self.params[n]) for n in self.stage_names()]

    def base_kernel(self) -> np.ndarray | None:
        if self.base is None:
            return None
        return self.base if self.kind == "conv" else self.base[None, None]

    def reconstruction_kernel(self) -> np.ndarray:
        """Composed kernel of the trainable weight path (excluding the base)."""
        if self.mode == "full":
            return self._to_kernel("W", self.params["W"])
        return compose_kernels(self.decomp, self.stage_kernels())

    def effective_kernel(self) -> np.ndarray:
        K = self.reconstruction_kernel()
        base = self.base_kernel()
        return K if base is None else base + K

    def kernel_grads_to_params(self, dK: np.ndarray) -> dict[str, np.ndarray]:
        """Map a gradient on the effective kernel onto the trainable weights."""
        if self.mode == "full":
            return {"W": self._from_kernel("W", dK)}
        dks = compose_kernels_adjoint(self.decomp, self.stage_kernels(), dK)
        return {n: self._from_kernel(n, d) for n, d in zip(self.stage_names(), dks)}

    # forward / backward

    def _as_image(self, x: np.ndarray) -> np.ndarray:
        _, _, C, _ = self.kernel_shape
        if self.kind == "dense":
            x4 = x.reshape(x.shape[0], 1, 1, -1)
        else:
            if x.ndim != 4:
                raise ShapeError(f"conv layer expects N x H x W x C input, got {x.shape}")
            x4 = x
        if x4.shape[-1] != C:
            raise ShapeError(f"layer expects {C} input channels/features, got {x4.shape[-1]}")
        return x4

    def forward(self, x: np.ndarray):
        x4 = self._as_image(x)
        z = x4
        stage_cache = []
        for K in self.stage_kernels():
            kh, kw, _, F = K.shape
            cols = im2col(z, kh, kw)
            stage_cache.append((cols, z.shape, K))
            z = (cols @ K.reshape(-1, F)).reshape(*z.shape[:3], F)
        base = self.base_kernel()
        if base is not None:
            z = z + conv2d(x4, base)
        z = z + self.params["b"]
        out = np.maximum(z, 0.0) if self.activation == "relu" else z
        cache = {"in_shape": x.shape, "x4": x4, "stages": stage_cache, "pre": z}
        if self.kind == "dense":
            out = out.reshape(out.shape[0], -1)
        return out, cache

    def backward(self, cache, dout: np.ndarray):
        pre = cache["pre"]
        dy = dout.reshape(pre.shape)
        if self.activation == "relu":
            dy = dy * (pre > 0)
        cache["dy"] = dy
        grads = {"b": dy.sum(axis=(0, 1, 2))}
        dz = dy
        for name, (cols, z_shape, K) in zip(reversed(self.stage_names()), reversed(cache["stages"])):
            kh, kw, _, F = K.shape
            dz_flat = dz.reshape(-1, F)
            grads[name] = self._from_kernel(name, (cols.T @ dz_flat).reshape(K.shape))
            dz = col2im(dz_flat @ K.reshape(-1, F).T, z_shape, kh, kw)
        base = self.base_kernel()
        if base is not None:
            kh, kw, _, F = base.shape
            dz = dz + col2im(dy.reshape(-1, F) @ base.reshape(-1, F).T, cache["x4"].shape, kh, kw)
        return dz.reshape(cache["in_shape"]), grads

    def effective_grad(self, cache) -> np.ndarray:
        """Gradient w.r.t. the effective weight (m x n for dense, 4-D for conv)."""
        if "dy" not in cache:
            raise ContractError("effective_grad needs a cache that went through backward")
        h, w, C, F = self.kernel_shape
        dK = (im2col(cache["x4"], h, w).T @ cache["dy"].reshape(-1, F)).reshape(h, w, C, F)
        return dK[0, 0] if self.kind == "dense" else dK


def effective_weight(layer: Layer) -> np.ndarray:
    """``W`` for full layers, ``W0 + reconstruction`` otherwise; matrix or 4-D kernel."""
    K = layer.effective_kernel()
    return K[0, 0].copy() if layer.kind == "dense" else K


def unfold_kernel(K: np.ndarray, fold: str = "hwc_f") -> np.ndarray:
    """Two-dimensional view of a weight for spectral analysis.

    ``"hwc_f"`` gives ``(h*w*C) x F``; ``"hc_wf"`` pairs the spatial axes
    with the channel axes, ``(h*C) x (w*F)``, so a 3x3x64x64 kernel becomes
    192 x 192.
    """
    if K.ndim == 2:
        return K
    h, w, C, F = K.shape
    if fold == "hwc_f":
        return K.reshape(h * w * C, F)
    if fold == "hc_wf":
        return K.transpose(0, 2, 1, 3).reshape(h * C, w * F)
    raise ParameterError(f"unknown fold {fold!r}")


def so_penalty(layer: Layer, coefficient: float):
    """Soft-orthogonality penalty ``c * ||M^T M - I||_F^2`` on the effective weight.

    ``M`` is the ``(h*w*C) x F`` unfolding. Returns ``(loss, grads)`` where
    ``grads`` covers the trainable weights only (no bias, no frozen base).
    """
    if coefficient < 0:
        raise ParameterError("coefficient must be non-negative")
    K = layer.effective_kernel()
    M = K.reshape(-1, K.shape[-1])
    R = M.T @ M - np.eye(M.shape[1])
    loss = float(coefficient * np.sum(R * R))
    dM = 4.0 * coefficient * (M @ R)
    return loss, layer.kernel_grads_to_params(dM.reshape(K.shape))


# -- construction -----------------------------------------------------------------

def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def dense(m: int, n: int, rng: np.random.Generator, activation: str = "relu") -> Layer:
    return Layer("dense", (m, n), activation,
                 params={"W": _he_uniform(rng, (m, n), m), "b": np.zeros(n)})


def conv(h: int, w: int, C: int, F: int, rng: np.random.Generator, activation: str = "relu") -> Layer:
    return Layer("conv", (h, w, C, F), activation,
                 params={"W": _he_uniform(rng, (h, w, C, F), h * w * C), "b": np.zeros(F)})


# -- losses -------------------------------------------------------------------------

def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -float(logp[np.arange(n), labels].mean())
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return loss, d / n


def mean_squared_error(out: np.ndarray, target: np.ndarray):
    target = target.reshape(out.shape)
    diff = out - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


# -- network --------------------------------------------------------------------------

@dataclass
class Cache:
    version: int
    layers: list[dict]


@dataclass(eq=False)
class Network:
    layers: list[Layer]
    input_shape: tuple[int, ...]
    loss: str = "ce"
    version: int = 0

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if self.loss not in LOSSES:
            raise ParameterError(f"unknown loss {self.loss!r}")

    def touch(self) -> None:
        """Mark parameters as changed; outstanding caches become stale."""
        self.version += 1

    def forward(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"input batch shape {x.shape[1:]} != {self.input_shape}")
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x)
            caches.append(c)
        return x.reshape(x.shape[0], -1), Cache(self.version, caches)

    def backward(self, cache: Cache, grad_logits: np.ndarray) -> dict[tuple[int, str], np.ndarray]:
        if cache.version != self.version:
            raise ContractError("stale cache: network changed since forward")
        grads: dict[tuple[int, str], np.ndarray] = {}
        d = grad_logits
        for i in range(len(self.layers) - 1, -1, -1):
            d, g = self.layers[i].backward(cache.layers[i], d)
            for name, arr in g.items():
                grads[(i, name)] = arr
        return grads

    def loss_value(self, logits: np.ndarray, targets: np.ndarray):
        if self.loss == "ce":
            return softmax_cross_entropy(logits, targets)
        return mean_squared_error(logits, targets)

    def loss_and_grads(self, x: np.ndarray, targets: np.ndarray):
        logits, cache = self.forward(x)
        loss, dlogits = self.loss_value(logits, targets)
        return loss, self.backward(cache, dlogits), cache

    def parameters(self) -> dict[tuple[int, str], np.ndarray]:
        return {(i, n): p for i, layer in enumerate(self.layers) for n, p in layer.params.items()}

    def trainable_count(self) -> int:
        return sum(layer.trainable_count() for layer in self.layers)

    def copy(self) -> Network:
        return Network([l.copy() for l in self.layers], self.input_shape, self.loss, self.version)


def mlp(sizes: list[int], rng: np.random.Generator, loss: str = "ce") -> Network:
    """Fully connected ReLU network; the final layer is linear."""
    layers = [dense(a, b, rng, "relu") for a, b in zip(sizes[:-2], sizes[1:-1])]
    layers.append(dense(sizes[-2], sizes[-1], rng, "identity"))
    return Network(layers, (sizes[0],), loss)
