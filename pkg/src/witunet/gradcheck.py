"""Central finite-difference gradient verification.

Two modes: float32 (h=1e-3, tolerance 1e-2) and a float64 check mode
(h=1e-5, tolerance 1e-4). The numeric reference is always evaluated in
float64 at the exact (upcast) parameter values, so the comparison probes the
backward implementation rather than float32 forward noise; the loose float32
tolerance absorbs that mode's own forward/backward rounding.

Errors are normalized per tensor:
max_i |analytic_i - numeric_i| / max(floor, max|analytic|, max|numeric|),
floor 1e-3, over sampled coordinates (half chosen among the largest analytic
gradients, half uniformly), which keeps the check relative for healthy
gradients without dividing by per-coordinate zeros.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .network import NetConfig, init_params, forward, ParamStore
from .rng import Rng, derive_seed, uniform_field
from . import tensor as T
from .tensor import Tensor

FD_SETTINGS = {
    np.float32: {"h": 1e-3, "tol": 1e-2},
    np.float64: {"h": 1e-5, "tol": 1e-4},
}
_ERR_FLOOR = 1e-3


@dataclass
class GradCheckResult:
    name: str
    max_error: float
    sampled: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol


def sample_coords(rng: Rng, analytic: np.ndarray, n: int) -> list[int]:
    """Half the coordinates from the largest |analytic| entries, half uniform."""
    size = analytic.size
    if size <= n:
        return list(range(size))
    flat = np.abs(analytic.reshape(-1))
    top = list(np.argsort(flat)[-max(1, n // 2):])
    uniform = [rng.randint(0, size) for _ in range(n)]
    coords = list(dict.fromkeys(int(i) for i in top + uniform))[:n]
    return coords


def fd_gradient(fd_loss, data: np.ndarray, coords, h: float) -> np.ndarray:
    """Central differences of fd_loss() wrt data[coords]; data is float64."""
    flat = data.reshape(-1)
    out = np.zeros(len(coords))
    for j, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + h
        up = fd_loss()
        flat[i] = orig - h
        down = fd_loss()
        flat[i] = orig
        out[j] = (up - down) / (2.0 * h)
    return out


def run_check(param_arrays: dict[str, np.ndarray], loss_builder, dtype=np.float32,
              n_samples: int = 25, seed: int = 0,
              grad_override_for: str | None = None) -> list[GradCheckResult]:
    """Check analytic gradients of a scalar loss against finite differences.

    ``loss_builder(params)`` must rebuild the loss Tensor from a dict of
    parameter Tensors of any float dtype. ``grad_override_for`` flips the sign
    of one analytic gradient (detector sanity hook).
    """
    settings = FD_SETTINGS[dtype]
    rng = Rng(derive_seed(seed, 42))
    params = {k: Tensor(v.astype(dtype), requires_grad=True) for k, v in param_arrays.items()}
    loss_builder(params).backward()

    fd_params = {k: Tensor(v.astype(np.float64)) for k, v in param_arrays.items()}

    def fd_loss() -> float:
        with T.no_grad():
            return float(loss_builder(fd_params).data)

    results = []
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        if name == grad_override_for:
            analytic = -analytic
        coords = sample_coords(rng, analytic, n_samples)
        num = fd_gradient(fd_loss, fd_params[name].data, coords, settings["h"])
        ana = analytic.reshape(-1)[coords].astype(np.float64)
        denom = max(_ERR_FLOOR, float(np.max(np.abs(analytic))), float(np.max(np.abs(num))))
        err = float(np.max(np.abs(ana - num))) / denom
        results.append(GradCheckResult(name, err, len(coords), settings["tol"]))
    return results


def random_array(shape, seed, lo=-1.0, hi=1.0) -> np.ndarray:
    return uniform_field(seed, shape, lo, hi)


def weighted_sum(out: Tensor, seed: int) -> Tensor:
    """Scalar probe sum(R * out) with fixed random R, so gradients do not
    cancel by symmetry (a plain sum() zeroes softmax-style gradients)."""
    r = uniform_field(seed, out.shape, 0.25, 1.0).astype(out.data.dtype)
    return T.sum_all(T.mul(out, Tensor(r)))


def jittered_store_arrays(net_cfg: NetConfig, seed: int) -> dict[str, np.ndarray]:
    """Production init plus uniform jitter: the stock zero-init of the output
    projection would make every upstream analytic gradient exactly zero."""
    store = init_params(net_cfg, seed=derive_seed(seed, 11))
    arrays = {}
    for i, (name, p) in enumerate(store.items()):
        jitter = uniform_field(derive_seed(seed, 100 + i), p.shape, -0.05, 0.05)
        arrays[name] = p.data + jitter
    return arrays


def check_network(net_cfg: NetConfig, image_hw: tuple[int, int] = (16, 16), seed: int = 3,
                  dtype=np.float32, n_samples: int = 120) -> GradCheckResult:
    """Finite-difference check of the full forward on >= n_samples parameter
    coordinates spread over the whole store; returns the worst result."""
    arrays = jittered_store_arrays(net_cfg, seed)
    h, w = image_hw
    y = uniform_field(derive_seed(seed, 13), (1, 1, h, w), 0.0, 1.0)
    probe_seed = derive_seed(seed, 17)

    def loss_builder(params: dict[str, Tensor]) -> Tensor:
        dt = next(iter(params.values())).data.dtype
        store = ParamStore()
        for name, tensor in params.items():
            store.register(name, tensor)
        out = forward(Tensor(y.astype(dt)), store, net_cfg)
        return weighted_sum(out, probe_seed)

    per_param = max(1, math.ceil(n_samples / len(arrays)))
    results = run_check(arrays, loss_builder, dtype=dtype, n_samples=per_param, seed=seed)
    total = sum(r.sampled for r in results)
    worst = max(results, key=lambda r: r.max_error)
    return GradCheckResult(f"network[{worst.name}]", worst.max_error, total, worst.tol)
