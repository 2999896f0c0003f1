"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import functional as F
from . import loss as L
from . import model as M
from .tensor import Tensor, precision

TOLERANCE = 1e-4


def finite_diff_check(
    f: Callable[[], Tensor],
    theta: Tensor,
    h: float = 1e-5,
    coords: np.ndarray | None = None,
) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(1, |analytic|)``.

    ``f`` takes no arguments and must read ``theta`` (perturbed in place)
    when building its scalar output.  ``coords`` restricts the check to the
    given flat indices.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    theta.grad = None
    theta.requires_grad = True
    f().backward()
    analytic = np.zeros_like(theta.data) if theta.grad is None else theta.grad.copy()

    flat = theta.data.reshape(-1)
    grad_flat = analytic.reshape(-1)
    idx = np.arange(flat.size) if coords is None else np.asarray(coords)
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f().item()
        flat[i] = orig - h
        f_minus = f().item()
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * h)
        err = abs(grad_flat[i] - numeric) / max(1.0, abs(grad_flat[i]))
        worst = max(worst, err)
    return worst


def _leaf(rng: np.random.Generator, *shape: int, scale: float = 1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _projected(out_fn: Callable[[], Tensor], rng: np.random.Generator) -> Callable[[], Tensor]:
    """Reduce a tensor-valued function to a scalar through a fixed random projection."""
    probe = out_fn()
    weights = Tensor(rng.normal(size=probe.shape))
    return lambda: (out_fn() * weights).sum()


def _max_over(f: Callable[[], Tensor], leaves: list[Tensor], h: float) -> float:
    return max(finite_diff_check(f, t, h) for t in leaves)


# each case builds one random instance and returns its max relative error

def _case_conv2d(rng, h):
    stride, dilation, padding = rng.integers(1, 3), rng.integers(1, 3), rng.integers(0, 3)
    c_in, c_out, size = rng.integers(1, 4), rng.integers(1, 4), rng.integers(5, 8)
    x = _leaf(rng, 2, c_in, size, size)
    w = _leaf(rng, c_out, c_in, 3, 3)
    b = _leaf(rng, c_out)
    f = _projected(lambda: F.conv2d(x, w, b, int(stride), int(dilation), int(padding)), rng)
    return _max_over(f, [x, w, b], h)


def _case_fully_connected(rng, h):
    n_in, n_out = rng.integers(1, 9), rng.integers(1, 6)
    x, w, b = _leaf(rng, 3, n_in), _leaf(rng, n_out, n_in), _leaf(rng, n_out)
    f = _projected(lambda: F.fully_connected(x, w, b), rng)
    return _max_over(f, [x, w, b], h)


def _case_gelu(rng, h):
    x = _leaf(rng, 12, scale=2.0)
    return _max_over(_projected(lambda: F.gelu(x), rng), [x], h)


def _case_sigmoid(rng, h):
    x = _leaf(rng, 12, scale=3.0)
    return _max_over(_projected(lambda: F.sigmoid(x), rng), [x], h)


def _case_global_avg_pool(rng, h):
    x = _leaf(rng, 2, 3, rng.integers(1, 5), rng.integers(1, 5))
    return _max_over(_projected(lambda: F.global_avg_pool(x), rng), [x], h)


def _case_batch_norm(rng, h):
    c = int(rng.integers(1, 4))
    x = _leaf(rng, int(rng.integers(2, 4)), c, 3, 3, scale=2.0)
    gamma, beta = _leaf(rng, c), _leaf(rng, c)
    mean, var = np.zeros(c), np.ones(c)
    mode = "train" if rng.random() < 0.75 else "eval"
    if mode == "eval":
        mean, var = rng.normal(size=c), rng.uniform(0.5, 2.0, size=c)
    f = _projected(lambda: F.batch_norm(x, gamma, beta, mode, mean.copy(), var.copy()), rng)
    return _max_over(f, [x, gamma, beta], h)


def _case_instance_norm(rng, h):
    x = _leaf(rng, 2, int(rng.integers(1, 4)), int(rng.integers(2, 5)), int(rng.integers(2, 5)), scale=2.0)
    return _max_over(_projected(lambda: F.instance_norm(x), rng), [x], h)


def _case_dropout(rng, h):
    x = _leaf(rng, 4, 6)
    p = float(rng.uniform(0.0, 0.9))
    seed = int(rng.integers(2**31))
    f = _projected(lambda: F.dropout(x, p, "train", np.random.default_rng(seed)), rng)
    return _max_over(f, [x], h)


def _case_l2_normalize(rng, h):
    x = _leaf(rng, 3, int(rng.integers(2, 10)))
    return _max_over(_projected(lambda: F.l2_normalize(x), rng), [x], h)


def _case_cin(rng, h):
    c = int(rng.integers(1, 4))
    x = _leaf(rng, 2, c, 3, 3)
    params = M.CinParams(gamma=(_leaf(rng, c), _leaf(rng, c)), beta=(_leaf(rng, c), _leaf(rng, c)))
    modality = int(rng.integers(0, 2))
    f = _projected(lambda: M.cin_forward(x, modality, params), rng)
    return _max_over(f, [x, params.gamma[modality], params.beta[modality]], h)


def _case_hyper_module(rng, h):
    c_in, c_out = 8 * int(rng.integers(1, 3)), int(rng.integers(1, 5))
    width = c_in // 8
    x = _leaf(rng, 2, c_in, 4, 4)
    y = _leaf(rng, 2, c_out, 3, 3)
    params = M.HyperModuleParams(
        _leaf(rng, width, c_in), _leaf(rng, width),
        _leaf(rng, c_out, width), _leaf(rng, c_out),
        _leaf(rng, c_out, width), _leaf(rng, c_out),
    )
    f = _projected(lambda: M.hyper_module_forward(x, y, params), rng)
    leaves = [x, y, params.bneck_w, params.bneck_b, params.scale_w, params.scale_b, params.shift_w, params.shift_b]
    return _max_over(f, leaves, h)


def _case_triplet_loss(rng, h):
    while True:
        n, k = int(rng.integers(2, 6)), int(rng.integers(2, 8))
        da, db = _leaf(rng, n, k), _leaf(rng, n, k)
        strategy = "hard" if rng.random() < 0.5 else "random"
        triplets = L.select_triplets(da.data, db.data, strategy, rng)
        # redraw until every hinge argument is clear of the kink
        if np.min(np.abs(_hinge_arguments(da.data, db.data, triplets))) > 1e-3:
            break
    f = lambda: L.batch_loss(da, db, margin=L.DEFAULT_MARGIN, triplets=triplets)
    return _max_over(f, [da, db], h)


def _hinge_arguments(da: np.ndarray, db: np.ndarray, triplets: L.TripletBatch, margin: float = L.DEFAULT_MARGIN) -> np.ndarray:
    dm = L.distance_matrix(da, db)
    n = len(da)
    i = np.arange(n)
    first = dm[i, i] - dm[i, triplets.negatives_for(0)] + margin
    second = dm[i, i] - dm[triplets.negatives_for(1), i] + margin
    return np.concatenate([first, second])


PRIMITIVES: dict[str, Callable[[np.random.Generator, float], float]] = {
    "conv2d": _case_conv2d,
    "fully_connected": _case_fully_connected,
    "gelu": _case_gelu,
    "sigmoid": _case_sigmoid,
    "global_avg_pool": _case_global_avg_pool,
    "batch_norm": _case_batch_norm,
    "instance_norm": _case_instance_norm,
    "dropout": _case_dropout,
    "l2_normalize": _case_l2_normalize,
    "cin": _case_cin,
    "hyper_module": _case_hyper_module,
    "triplet_loss": _case_triplet_loss,
}


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    instances: int

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error < TOLERANCE


def perturbed_weights(seed: int, arch: M.Architecture = M.DEFAULT_ARCH) -> M.HypNetWeights:
    """Freshly initialized weights with every parameter moved off its init value.

    Zero-initialized hypernetwork heads would otherwise hide bottleneck
    gradients from the check.
    """
    weights = M.init_weights(seed, arch)
    rng = np.random.default_rng(seed + 1)
    for name, t in weights.params.items():
        scale = 0.1 if ("gamma" in name or "beta" in name or "bias" in name) else 0.05
        t.data += rng.normal(0.0, scale, size=t.shape)
    return weights


def model_gradcheck(seed: int, coords_per_tensor: int = 2, n_pairs: int = 2, h: float = 1e-5, arch: M.Architecture = M.DEFAULT_ARCH) -> CheckResult:
    """Full Hyp-Net forward (train mode) plus symmetric triplet loss, every parameter tensor."""
    with precision("f64"):
        rng = np.random.default_rng(seed)
        weights = perturbed_weights(seed, arch)
        shape = (n_pairs, arch.in_channels, arch.patch_size, arch.patch_size)
        xa = Tensor(rng.uniform(-1, 1, size=shape))
        xb = Tensor(rng.uniform(-1, 1, size=shape))
        dropout_seed = int(rng.integers(2**31))

        def descriptors():
            drop = np.random.default_rng(dropout_seed)
            return (
                M.hypnet_forward(xa, 0, weights, "train", drop),
                M.hypnet_forward(xb, 1, weights, "train", drop),
            )

        da, db = descriptors()
        triplets = L.select_triplets(da.data, db.data, "random", rng)
        if np.min(np.abs(_hinge_arguments(da.data, db.data, triplets))) < 1e-3:
            raise RuntimeError("model gradcheck instance sits on a hinge kink; choose another seed")

        def f():
            a, b = descriptors()
            return L.batch_loss(a, b, triplets=triplets)

        worst = 0.0
        for name, t in weights.named_parameters():
            coords = rng.choice(t.data.size, size=min(coords_per_tensor, t.data.size), replace=False)
            worst = max(worst, finite_diff_check(f, t, h, coords))
        return CheckResult("hypnet+triplet", worst, len(weights.params))


def run_suite(seed: int = 0, instances: int = 100, h: float = 1e-5, include_model: bool = True, only: list[str] | None = None) -> list[CheckResult]:
    """Run every primitive case ``instances`` times at float64."""
    results = []
    with precision("f64"):
        for k, (name, case) in enumerate(PRIMITIVES.items()):
            if only is not None and name not in only:
                continue
            rng = np.random.default_rng([seed, k])
            worst = 0.0
            for _ in range(instances):
                err = case(rng, h)
                worst = err if not np.isfinite(err) else max(worst, err)
                if not np.isfinite(worst):
                    break
            results.append(CheckResult(name, worst, instances))
        if include_model and (only is None or "hypnet+triplet" in only):
            results.append(model_gradcheck(seed))
    return results
