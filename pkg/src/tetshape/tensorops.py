"""Neural operators on tetrahedral grids with analytic backward passes.

Convolution aggregates a tet and its four face neighbors with per-slot weight
matrices; pooling and upsampling move features along the subdivision
hierarchy.  Everything runs in float64 so the finite-difference gradient
checker can be tight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .tetgrid import NONE, GridHierarchy, TetGrid


class NonFiniteError(ValueError):
    """A layer boundary saw NaN or Inf."""


def check_finite(arr, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{what} contains NaN or Inf")


@dataclass
class FeatureTensor:
    """Per-tet features at one grid level."""

    level: int
    data: np.ndarray  # (K, C) float64

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError(f"feature data must be (K, C), got {self.data.shape}")

    @property
    def num_tets(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]


def _neighbor_ops(grid: TetGrid):
    """Gather indices (sentinel -> zero-padding row) and the transposed
    scatter matrix used by convolution backward.  Cached on the grid."""
    cached = getattr(grid, "_conv_ops", None)
    if cached is not None:
        return cached
    K = grid.num_tets
    nb = grid.neighbors
    gather = np.where(nb == NONE, K, nb)                  # (K, 4), K = zero row
    valid = nb != NONE
    rows = nb[valid]
    cols = (np.arange(K)[:, None] * 4 + np.arange(4))[valid]
    scatter = sparse.csr_matrix(
        (np.ones(len(rows)), (rows, cols)), shape=(K, 4 * K)
    )
    grid._conv_ops = (gather, scatter)
    return grid._conv_ops


class Layer:
    """Common parameter bookkeeping; parameter-free layers leave it empty."""

    def params(self) -> dict:
        return {}

    def grads(self) -> dict:
        return {}

    def zero_grads(self) -> None:
        for g in self.grads().values():
            g[...] = 0.0


class TetConv(Layer):
    """out[k] = W0 x[k] + sum_s Ws x[neighbor_s(k)] + b, zero padding at the
    domain boundary.  The neighbor slot order is the grid's canonical one."""

    def __init__(self, grid: TetGrid, c_in: int, c_out: int, rng=None):
        self.grid = grid
        self.c_in = c_in
        self.c_out = c_out
        if rng is None:
            rng = np.random.default_rng(0)
        scale = np.sqrt(2.0 / (5 * c_in))
        self.W = rng.standard_normal((5, c_out, c_in)) * scale
        self.b = np.zeros(c_out)
        self.gW = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)
        self._gather, self._scatter = _neighbor_ops(grid)
        self._xa = None

    def params(self):
        return {"W": self.W, "b": self.b}

    def grads(self):
        return {"W": self.gW, "b": self.gb}

    def forward(self, x: FeatureTensor) -> FeatureTensor:
        if x.num_tets != self.grid.num_tets or x.channels != self.c_in:
            raise ValueError(
                f"conv expects ({self.grid.num_tets}, {self.c_in}) features, "
                f"got ({x.num_tets}, {x.channels})"
            )
        check_finite(x.data, "conv input")
        K = x.num_tets
        padded = np.empty((K + 1, self.c_in))
        padded[:K] = x.data
        padded[K] = 0.0
        xn = np.take(padded, self._gather.ravel(), axis=0)   # (4K, c_in)
        self._x = x.data
        self._xn = xn
        w0 = self.W[0]
        wn = self.W[1:].transpose(1, 0, 2).reshape(self.c_out, 4 * self.c_in)
        out = x.data @ w0.T
        out += xn.reshape(K, 4 * self.c_in) @ wn.T
        out += self.b
        return FeatureTensor(x.level, out)

    def backward(self, grad_out, accumulate=True):
        K = self.grid.num_tets
        if accumulate:
            self.gW[0] += grad_out.T @ self._x
            gwn = grad_out.T @ self._xn.reshape(K, 4 * self.c_in)
            self.gW[1:] += gwn.reshape(self.c_out, 4, self.c_in).transpose(1, 0, 2)
            self.gb += grad_out.sum(axis=0)
        wn = self.W[1:].transpose(1, 0, 2).reshape(self.c_out, 4 * self.c_in)
        gx = grad_out @ self.W[0]
        gxa = (grad_out @ wn).reshape(4 * K, self.c_in)
        gx += self._scatter @ gxa
        return gx


class TetPool(Layer):
    """Aggregate each supercell's 8 children onto the parent (max or avg)."""

    def __init__(self, hierarchy: GridHierarchy, level: int, mode: str = "avg"):
        if level < 2:
            raise ValueError("pooling needs a coarser level below the input")
        if mode not in ("max", "avg"):
            raise ValueError(f"unknown pooling mode {mode!r}")
        self.level = level
        self.mode = mode
        self.child_map = hierarchy.child_map(level - 1)
        self._argmax = None

    def forward(self, x: FeatureTensor) -> FeatureTensor:
        if x.level != self.level:
            raise ValueError(f"pool bound to level {self.level}, got {x.level}")
        check_finite(x.data, "pool input")
        xc = x.data[self.child_map]                      # (Kp, 8, C)
        if self.mode == "avg":
            out = xc.mean(axis=1)
        else:
            self._argmax = np.argmax(xc, axis=1)         # first index on ties
            out = np.take_along_axis(xc, self._argmax[:, None, :], axis=1)[:, 0]
        return FeatureTensor(x.level - 1, out)

    def backward(self, grad_out, accumulate=True):
        Kp, C = grad_out.shape
        K = Kp * 8
        if self.mode == "avg":
            gx = np.empty((K, C))
            gx[self.child_map] = grad_out[:, None, :] / 8.0
        else:
            rows = np.take_along_axis(self.child_map, self._argmax, axis=1)  # (Kp, C)
            flat = rows * C + np.arange(C)[None, :]
            gx = np.bincount(
                flat.ravel(), weights=grad_out.ravel(), minlength=K * C
            ).reshape(K, C)
        return gx


class TetUpsample(Layer):
    """Interpolate coarse features onto children: inverse centroid-distance
    weighted average over the parent and the parent's face neighbors."""

    def __init__(self, hierarchy: GridHierarchy, level: int, include_parent: bool = True):
        if level > hierarchy.num_levels:
            raise ValueError("cannot upsample beyond the finest level")
        self.level = level
        self.U = hierarchy.upsample_matrix(level, include_parent=include_parent)
        self.Ut = self.U.T.tocsr()

    def forward(self, x: FeatureTensor) -> FeatureTensor:
        if x.level != self.level - 1:
            raise ValueError(
                f"upsample to level {self.level} expects level {self.level - 1} input"
            )
        check_finite(x.data, "upsample input")
        return FeatureTensor(self.level, self.U @ x.data)

    def backward(self, grad_out, accumulate=True):
        return self.Ut @ grad_out


class InstanceNorm(Layer):
    """Per-channel normalization over all tets of the instance."""

    EPS = 1e-5

    def __init__(self, channels: int):
        self.gain = np.ones(channels)
        self.shift = np.zeros(channels)
        self.ggain = np.zeros(channels)
        self.gshift = np.zeros(channels)
        self._xhat = None
        self._inv_std = None

    def params(self):
        return {"gain": self.gain, "shift": self.shift}

    def grads(self):
        return {"gain": self.ggain, "shift": self.gshift}

    def forward(self, x: FeatureTensor) -> FeatureTensor:
        check_finite(x.data, "instance-norm input")
        mean = x.data.mean(axis=0)
        xhat = x.data - mean
        var = np.einsum("kc,kc->c", xhat, xhat) / len(xhat)
        self._inv_std = 1.0 / np.sqrt(var + self.EPS)
        xhat *= self._inv_std
        self._xhat = xhat
        return FeatureTensor(x.level, xhat * self.gain + self.shift)

    def backward(self, grad_out, accumulate=True):
        K = grad_out.shape[0]
        xhat = self._xhat
        gsum = grad_out.sum(axis=0)
        gxsum = np.einsum("kc,kc->c", grad_out, xhat)
        if accumulate:
            self.ggain += gxsum
            self.gshift += gsum
        gx = (grad_out - gsum / K - xhat * (gxsum / K)) * (self.gain * self._inv_std)
        return gx


class LeakyReLU(Layer):
    def __init__(self, slope: float = 0.2):
        self.slope = slope
        self._mask = None

    def forward(self, x: FeatureTensor) -> FeatureTensor:
        self._mask = x.data > 0
        return FeatureTensor(x.level, np.where(self._mask, x.data, self.slope * x.data))

    def backward(self, grad_out, accumulate=True):
        return np.where(self._mask, grad_out, self.slope * grad_out)


class Linear(Layer):
    """Affine map on flat vectors."""

    def __init__(self, n_in: int, n_out: int, rng=None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.W = rng.standard_normal((n_out, n_in)) * np.sqrt(1.0 / n_in)
        self.b = np.zeros(n_out)
        self.gW = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)
        self._x = None

    def params(self):
        return {"W": self.W, "b": self.b}

    def grads(self):
        return {"W": self.gW, "b": self.gb}

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64).ravel()
        if x.shape[0] != self.W.shape[1]:
            raise ValueError(f"linear expects {self.W.shape[1]} inputs, got {x.shape[0]}")
        check_finite(x, "linear input")
        self._x = x
        return self.W @ x + self.b

    def backward(self, grad_out, accumulate=True):
        grad_out = np.asarray(grad_out, dtype=np.float64).ravel()
        if accumulate:
            self.gW += np.outer(grad_out, self._x)
            self.gb += grad_out
        return self.W.T @ grad_out


def tet_conv(x: FeatureTensor, W, b, grid: TetGrid) -> FeatureTensor:
    """Functional convolution with explicit weights (5, C_out, C_in)."""
    layer = TetConv(grid, W.shape[2], W.shape[1])
    layer.W = np.asarray(W, dtype=np.float64)
    layer.b = np.asarray(b, dtype=np.float64)
    return layer.forward(x)


def tet_pool(x: FeatureTensor, hierarchy: GridHierarchy, mode: str = "avg") -> FeatureTensor:
    return TetPool(hierarchy, x.level, mode).forward(x)


def tet_upsample(x: FeatureTensor, hierarchy: GridHierarchy, include_parent=True) -> FeatureTensor:
    return TetUpsample(hierarchy, x.level + 1, include_parent).forward(x)


def instance_norm(x: FeatureTensor, gain, shift) -> FeatureTensor:
    layer = InstanceNorm(x.channels)
    layer.gain = np.asarray(gain, dtype=np.float64)
    layer.shift = np.asarray(shift, dtype=np.float64)
    return layer.forward(x)


def leaky_relu(x: FeatureTensor, slope: float = 0.2) -> FeatureTensor:
    return LeakyReLU(slope).forward(x)


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


@dataclass
class GradCheckReport:
    results: list
    tolerance: float

    @property
    def all_passed(self) -> bool:
        return all(r.passed for r in self.results)

    def __str__(self):
        return "\n".join(
            f"  [{'PASS' if r.passed else 'FAIL'}] {r.name}: "
            f"max rel err {r.max_rel_error:.3e} (tol {r.tolerance:.1e})"
            for r in self.results
        )


def _rel_error(analytic, numeric):
    denom = max(abs(analytic), abs(numeric), 1e-6)
    return abs(analytic - numeric) / denom


def gradcheck_layer(layer, x: FeatureTensor, tolerance: float = 1e-4,
                    h: float = 1e-5, seed: int = 0) -> GradCheckReport:
    """Central finite differences against the layer's backward pass, using a
    random linear functional of the output as the scalar loss."""
    # decorrelated from any rng the caller used to draw the inputs
    rng = np.random.default_rng([seed, 0xC0FFEE])
    out0 = layer.forward(x)
    data0 = out0.data if isinstance(out0, FeatureTensor) else out0
    R = rng.standard_normal(data0.shape)

    def loss():
        out = layer.forward(x)
        d = out.data if isinstance(out, FeatureTensor) else out
        return float((d * R).sum())

    layer.zero_grads()
    gx = layer.backward(R)
    analytic = {"input": np.asarray(gx)}
    analytic.update({k: v.copy() for k, v in layer.grads().items()})

    results = []
    targets = {"input": x.data if isinstance(x, FeatureTensor) else x}
    targets.update(layer.params())
    for name, arr in targets.items():
        worst = 0.0
        flat = arr.reshape(-1)
        ana = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss()
            flat[i] = orig - h
            lm = loss()
            flat[i] = orig
            worst = max(worst, _rel_error(ana[i], (lp - lm) / (2 * h)))
        results.append(GradCheckResult(name, worst, tolerance))
    return GradCheckReport(results, tolerance)


def run_standard_gradchecks(hierarchy: GridHierarchy, tolerance: float = 1e-4,
                            seed: int = 0) -> GradCheckReport:
    """Gradient-check every operator on small random instances."""
    rng = np.random.default_rng(seed)
    fine = hierarchy.finest
    level = hierarchy.num_levels
    results = []

    def run(name, layer, x):
        rep = gradcheck_layer(layer, x, tolerance=tolerance, seed=seed)
        for r in rep.results:
            results.append(GradCheckResult(f"{name}.{r.name}", r.max_rel_error, tolerance))

    x = FeatureTensor(level, rng.standard_normal((fine.num_tets, 3)))
    run("tet_conv", TetConv(fine, 3, 2, rng), x)
    if level >= 2:
        run("tet_pool_avg", TetPool(hierarchy, level, "avg"), x)
        run("tet_pool_max", TetPool(hierarchy, level, "max"), x)
        coarse = hierarchy.grid(level - 1)
        xc = FeatureTensor(level - 1, rng.standard_normal((coarse.num_tets, 3)))
        run("tet_upsample", TetUpsample(hierarchy, level), xc)
    run("instance_norm", InstanceNorm(3), x)
    # keep clear of the kink at zero where the subgradient convention differs
    xa = FeatureTensor(level, np.where(np.abs(x.data) < 0.1, x.data + 0.2, x.data))
    run("leaky_relu", LeakyReLU(0.2), xa)
    run("linear", Linear(6, 4, rng), rng.standard_normal(6))
    return GradCheckReport(results, tolerance)
