"""Dense-array numerics, counter-based randomness and gradient checking.

Every tensor in the package is a plain ``numpy.ndarray``. Oracle tests run in
float64, training in float32; functions here keep the dtype of their inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_TWO_POW_M53 = 1.0 / 9007199254740992.0

GELU_C = math.sqrt(2.0 / math.pi)


class ContractError(ValueError):
    """An operation was called outside its documented preconditions."""


def check_finite(x: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{what} contains non-finite values")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ContractError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max subtraction."""
    z = x - x.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def layer_norm(x, gamma, beta, eps: float = 1e-6):
    """Normalise the last axis (population variance), then scale and shift."""
    return layer_norm_fwd(x, gamma, beta, eps)[0]


def layer_norm_fwd(x, gamma, beta, eps: float = 1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, (xhat, rstd, gamma)


def layer_norm_bwd(dy, cache):
    """Returns (dx, dgamma, dbeta)."""
    xhat, rstd, gamma = cache
    d = xhat.shape[-1]
    dxhat = dy * gamma
    dx = rstd * (dxhat - dxhat.sum(-1, keepdims=True) / d
                 - xhat * (dxhat * xhat).sum(-1, keepdims=True) / d)
    lead = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=lead), dy.sum(axis=lead)


def gelu(x):
    """tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    return gelu_fwd(x)[0]


def gelu_fwd(x):
    """GELU plus the tanh term, which the backward pass reuses."""
    th = x * x
    th *= x
    th *= 0.044715
    th += x
    th *= GELU_C
    np.tanh(th, out=th)
    y = th + 1.0
    y *= x
    y *= 0.5
    return y, th


def gelu_bwd(dy, x, th=None):
    if th is None:
        th = gelu_fwd(x)[1]
    s = x * x
    s *= 3 * 0.044715
    s += 1.0
    s *= 0.5 * GELU_C
    s *= x
    s *= 1.0 - th * th
    s += 0.5
    s += 0.5 * th
    s *= dy
    return s


def linear_bwd(dy, x, w):
    """Backward of ``x @ w + b`` over arbitrary leading axes: (dx, dw, db)."""
    dx = dy @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dx, x2.T @ dy2, dy2.sum(axis=0)


# ---------------------------------------------------------------- randomness

def _mix64(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


@dataclass(frozen=True)
class RngState:
    """Counter-based generator state.

    Word ``i`` of the stream is the splitmix64 output
    ``mix(seed + (counter + i + 1) * 0x9E3779B97F4A7C15)`` computed in wrapping
    64-bit integer arithmetic, so a ``(seed, counter)`` pair names the same
    words on every platform.
    """

    seed: int
    counter: int = 0

    def advance(self, n: int) -> "RngState":
        return RngState(self.seed, (self.counter + n) % (1 << 64))

    def split(self, key: int) -> "RngState":
        """Independent child stream keyed by an integer."""
        word = _mix64(np.array([(self.seed ^ (key * 0x2545F4914F6CDD1D)) % (1 << 64)],
                               dtype=np.uint64))
        return RngState(int(word[0]), 0)


def draw_bits(rng: RngState, n: int) -> tuple[np.ndarray, RngState]:
    idx = np.arange(1, n + 1, dtype=np.uint64) + np.uint64(rng.counter)
    with np.errstate(over="ignore"):
        z = np.uint64(rng.seed) + idx * _GOLDEN
    return _mix64(z), rng.advance(n)


def draw_uniform(rng: RngState, n: int) -> tuple[np.ndarray, RngState]:
    """Floats in [0, 1): top 53 bits of each word times 2**-53."""
    bits, rng = draw_bits(rng, n)
    return (bits >> np.uint64(11)).astype(np.float64) * _TWO_POW_M53, rng


def draw_int(rng: RngState, n: int, high: int) -> tuple[np.ndarray, RngState]:
    u, rng = draw_uniform(rng, n)
    return np.minimum((u * high).astype(np.int64), high - 1), rng


def draw_normal(rng: RngState, n: int, dtype=np.float64) -> tuple[np.ndarray, RngState]:
    """Standard normals by Box-Muller (cosine branch), two words per value.

    u1 = (w0 >> 11 + 1) * 2**-53 lies in (0, 1] so the log is finite;
    u2 = (w1 >> 11) * 2**-53.
    """
    bits, rng = draw_bits(rng, 2 * n)
    top = bits >> np.uint64(11)
    u1 = (top[0::2] + np.uint64(1)).astype(np.float64) * _TWO_POW_M53
    u2 = top[1::2].astype(np.float64) * _TWO_POW_M53
    z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)
    return z.astype(dtype, copy=False), rng


def permutation(rng: RngState, n: int) -> tuple[np.ndarray, RngState]:
    """Fisher-Yates shuffle of ``range(n)`` driven by the counter stream."""
    u, rng = draw_uniform(rng, max(n - 1, 0))
    perm = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = int(u[n - 1 - i] * (i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    return perm, rng


# ---------------------------------------------------------------- parameters

class ParamStore:
    """Named parameter arrays with matching gradient slots.

    Iteration order is lexicographic by name; checkpoints and gradient checks
    rely on it.
    """

    def __init__(self, entries: dict[str, np.ndarray] | None = None):
        self._values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        for name, value in (entries or {}).items():
            self.add(name, value)

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self._values:
            raise ContractError(f"duplicate parameter name {name!r}")
        self._values[name] = np.asarray(value)
        self.grads[name] = np.zeros_like(self._values[name])
        self._values = dict(sorted(self._values.items()))
        self.grads = {k: self.grads[k] for k in self._values}

    def names(self) -> list[str]:
        return list(self._values)

    def items(self):
        return self._values.items()

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if name not in self._values:
            raise KeyError(name)
        if value.shape != self._values[name].shape:
            raise ContractError(f"shape change for {name}: {self._values[name].shape} -> {value.shape}")
        self._values[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)

    def size(self) -> int:
        return sum(v.size for v in self._values.values())

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def accumulate(self, name: str, g: np.ndarray) -> None:
        self.grads[name] += g

    def astype(self, dtype) -> "ParamStore":
        return ParamStore({k: v.astype(dtype) for k, v in self._values.items()})

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self._values.items()})

    @property
    def dtype(self):
        return next(iter(self._values.values())).dtype


def finite_diff_check(
    loss_fn: Callable[[ParamStore], float],
    params: ParamStore,
    eps: float = 1e-4,
    samples: int = 20,
    rng: RngState | None = None,
    names: Iterable[str] | None = None,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn(params)`` must return the scalar loss and leave analytic
    gradients in ``params.grads`` (it is responsible for zeroing them first).
    Derivatives use the five-point central stencil. ``samples`` scalar coordinates are drawn uniformly from the flattened
    parameters listed in ``names`` (all by default). The relative error uses
    the denominator ``max(|analytic|, |numeric|, 1e-8)``.
    """
    rng = rng or RngState(0)
    pool = list(names) if names is not None else params.names()
    sizes = np.array([params[n].size for n in pool])
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    base = loss_fn(params)
    if not math.isfinite(base):
        raise FloatingPointError(f"loss is not finite ({base})")
    analytic = {n: params.grads[n].copy() for n in pool}

    picks, rng = draw_int(rng, samples, int(offsets[-1]))
    worst = 0.0
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, idx = pool[k], int(flat - offsets[k])
        arr = params[name].reshape(-1)
        orig = arr[idx]
        vals = []
        for k_step in (2, 1, -1, -2):
            arr[idx] = orig + k_step * eps
            vals.append(loss_fn(params))
        arr[idx] = orig
        if not all(math.isfinite(v) for v in vals):
            raise FloatingPointError(f"non-finite loss while perturbing {name}[{idx}]")
        # fourth-order central stencil
        numeric = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * eps)
        a = float(analytic[name].reshape(-1)[idx])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, rel)
    loss_fn(params)
    return worst
