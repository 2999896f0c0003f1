"""Pseudo-Siamese Hyp-Net descriptor network.

Both branches share every parameter except the conditional instance
normalization affines, which exist once per modality.  Deeper layers wrap
their convolution with a hypernetwork module that predicts a per-channel
scale (sigmoid gated) and shift from the convolution's own input.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import functional as F
from .tensor import ShapeError, Tensor, get_default_dtype

MODALITIES = (0, 1)


@dataclass(frozen=True)
class LayerSpec:
    channels: int
    stride: int
    dilation: int
    norm: str | None  # "cin", "bn" or None
    hyper: bool

    @property
    def padding(self) -> int:
        # keeps the spatial trace 64-64-32-32-16-16-8-8-8 for 3x3 kernels
        return self.dilation


LAYER_TABLE = (
    LayerSpec(32, 1, 1, "cin", False),
    LayerSpec(32, 2, 1, "cin", False),
    LayerSpec(64, 1, 2, "cin", False),
    LayerSpec(64, 2, 1, "bn", True),
    LayerSpec(128, 1, 2, "bn", True),
    LayerSpec(128, 2, 1, "bn", True),
    LayerSpec(128, 1, 1, "bn", True),
    LayerSpec(128, 1, 1, None, True),
)


@dataclass(frozen=True)
class Architecture:
    layers: tuple[LayerSpec, ...] = LAYER_TABLE
    in_channels: int = 1
    patch_size: int = 64
    descriptor_dim: int = 128
    dropout: float = 0.5
    hyper_reduction: int = 8

    def without_hyper(self) -> "Architecture":
        return replace(self, layers=tuple(replace(spec, hyper=False) for spec in self.layers))

    @property
    def uses_hyper(self) -> bool:
        return any(spec.hyper for spec in self.layers)

    def spatial_trace(self) -> list[int]:
        sizes, s = [], self.patch_size
        for spec in self.layers:
            s = F.conv_output_size(s, spec.stride, spec.dilation, spec.padding)
            sizes.append(s)
        return sizes

    @property
    def flatten_dim(self) -> int:
        return self.layers[-1].channels * self.spatial_trace()[-1] ** 2

    def input_channels(self, i: int) -> int:
        return self.in_channels if i == 0 else self.layers[i - 1].channels

    def bottleneck_width(self, i: int) -> int:
        width = self.input_channels(i) // self.hyper_reduction
        if width < 1:
            raise ValueError(f"layer {i + 1}: {self.input_channels(i)} input channels leave no bottleneck width")
        return width


DEFAULT_ARCH = Architecture()


@dataclass
class CinParams:
    gamma: tuple[Tensor, Tensor]
    beta: tuple[Tensor, Tensor]


@dataclass
class HyperModuleParams:
    bneck_w: Tensor
    bneck_b: Tensor
    scale_w: Tensor
    scale_b: Tensor
    shift_w: Tensor
    shift_b: Tensor


@dataclass
class HypNetWeights:
    """Named parameter tensors plus batch-norm running statistics.

    Layer indices in names are 1-based to follow the layer table
    (``conv1`` ... ``conv8``).
    """

    arch: Architecture
    params: dict[str, Tensor]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def cin(self, layer: int) -> CinParams:
        p = self.params
        return CinParams(
            gamma=(p[f"cin{layer}.gamma0"], p[f"cin{layer}.gamma1"]),
            beta=(p[f"cin{layer}.beta0"], p[f"cin{layer}.beta1"]),
        )

    def hyper(self, layer: int) -> HyperModuleParams:
        p, k = self.params, f"hyper{layer}"
        return HyperModuleParams(
            p[f"{k}.bneck.weight"], p[f"{k}.bneck.bias"],
            p[f"{k}.scale.weight"], p[f"{k}.scale.bias"],
            p[f"{k}.shift.weight"], p[f"{k}.shift.bias"],
        )

    def state(self) -> dict[str, np.ndarray]:
        """Every tensor (parameters then buffers) as plain arrays, in a stable order."""
        out = {name: t.data for name, t in self.params.items()}
        out.update(self.buffers)
        return out

    def copy(self) -> "HypNetWeights":
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, dtype=v.dtype) for k, v in self.params.items()}
        return HypNetWeights(self.arch, params, {k: v.copy() for k, v in self.buffers.items()})

    def astype(self, dtype) -> "HypNetWeights":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, dtype=dtype) for k, v in self.params.items()}
        return HypNetWeights(self.arch, params, {k: v.astype(dtype) for k, v in self.buffers.items()})

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        """Copy arrays into the existing tensors in place."""
        expected = set(self.params) | set(self.buffers)
        if set(state) != expected:
            missing, extra = expected - set(state), set(state) - expected
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, arr in state.items():
            target = self.params[name].data if name in self.params else self.buffers[name]
            if target.shape != arr.shape:
                raise ShapeError(f"{name}: stored shape {arr.shape} != expected {target.shape}")
            target[...] = arr

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    @property
    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())


def _fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_weights(seed: int, arch: Architecture = DEFAULT_ARCH, dtype=None) -> HypNetWeights:
    """Deterministic initialization for ``seed``.

    Convolution and FC weights are He-uniform in their fan-in with zero bias;
    normalization affines start at identity.  Hypernetwork scale and shift
    heads start at zero, so every module initially scales its convolution by
    exactly ``sigmoid(0) = 0.5`` and shifts by nothing.
    """
    dtype = dtype or get_default_dtype()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}

    def add(name: str, arr: np.ndarray) -> None:
        params[name] = Tensor(arr, requires_grad=True, dtype=dtype)

    for i, spec in enumerate(arch.layers):
        n = i + 1
        c_in, c_out = arch.input_channels(i), spec.channels
        add(f"conv{n}.weight", _fan_in_uniform(rng, (c_out, c_in, 3, 3), c_in * 9, dtype))
        add(f"conv{n}.bias", np.zeros(c_out))
        if spec.norm == "cin":
            for m in MODALITIES:
                add(f"cin{n}.gamma{m}", np.ones(c_out))
                add(f"cin{n}.beta{m}", np.zeros(c_out))
        elif spec.norm == "bn":
            add(f"bn{n}.gamma", np.ones(c_out))
            add(f"bn{n}.beta", np.zeros(c_out))
            buffers[f"bn{n}.running_mean"] = np.zeros(c_out, dtype=dtype)
            buffers[f"bn{n}.running_var"] = np.ones(c_out, dtype=dtype)
        if spec.hyper:
            width = arch.bottleneck_width(i)
            add(f"hyper{n}.bneck.weight", _fan_in_uniform(rng, (width, c_in), c_in, dtype))
            add(f"hyper{n}.bneck.bias", np.zeros(width))
            add(f"hyper{n}.scale.weight", np.zeros((c_out, width)))
            add(f"hyper{n}.scale.bias", np.zeros(c_out))
            add(f"hyper{n}.shift.weight", np.zeros((c_out, width)))
            add(f"hyper{n}.shift.bias", np.zeros(c_out))
    add("fc.weight", _fan_in_uniform(rng, (arch.descriptor_dim, arch.flatten_dim), arch.flatten_dim, dtype))
    add("fc.bias", np.zeros(arch.descriptor_dim))
    return HypNetWeights(arch, params, buffers)


def _check_modality(modality: int) -> None:
    if modality not in MODALITIES:
        raise ValueError(f"modality must be 0 or 1, got {modality!r}")


def cin_forward(x: Tensor, modality: int, params: CinParams) -> Tensor:
    """Instance normalization followed by the modality's own affine transform."""
    _check_modality(modality)
    gamma, beta = params.gamma[modality], params.beta[modality]
    c = x.shape[-3]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"CIN parameters have shape {gamma.shape}, input has {c} channels")
    y = F.instance_norm(x)
    tail = (c, 1, 1)
    return y * gamma.reshape(tail) + beta.reshape(tail)


def hyper_gates(x_in: Tensor, params: HyperModuleParams) -> tuple[Tensor, Tensor]:
    """Scale ``s`` in (0, 1) and shift ``t`` per output channel, each ``[N, C_out]``."""
    pooled = F.global_avg_pool(x_in)
    if pooled.ndim == 1:
        pooled = pooled.reshape(1, -1)
    if params.bneck_w.shape[1] != pooled.shape[1]:
        raise ShapeError(f"hyper module expects {params.bneck_w.shape[1]} input channels, got {pooled.shape[1]}")
    z = F.gelu(F.fully_connected(pooled, params.bneck_w, params.bneck_b))
    s = F.sigmoid(F.fully_connected(z, params.scale_w, params.scale_b))
    t = F.fully_connected(z, params.shift_w, params.shift_b)
    return s, t


def hyper_module_forward(x_in: Tensor, y_conv: Tensor, params: HyperModuleParams) -> Tensor:
    """Modulate ``y_conv`` channel-wise with factors predicted from ``x_in``."""
    s, t = hyper_gates(x_in, params)
    single = y_conv.ndim == 3
    y = y_conv.reshape(1, *y_conv.shape) if single else y_conv
    if s.shape[1] != y.shape[1]:
        raise ShapeError(f"hyper module produces {s.shape[1]} channels, convolution output has {y.shape[1]}")
    n, c = s.shape
    out = y * s.reshape(n, c, 1, 1) + t.reshape(n, c, 1, 1)
    return out.reshape(out.shape[1:]) if single else out


def normalize_patches(patches: np.ndarray) -> np.ndarray:
    """Map 8-bit intensities to [-1, 1]."""
    return np.asarray(patches, dtype=np.float64) / 127.5 - 1.0


def hypnet_forward(
    patch,
    modality: int,
    weights: HypNetWeights,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    trace: list | None = None,
) -> Tensor:
    """Descriptors for ``[1, H, W]`` (one patch) or ``[N, 1, H, W]`` inputs.

    ``trace``, when given, receives ``(stage, shape, std)`` tuples for every
    layer output and the flatten stage.
    """
    _check_modality(modality)
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    arch = weights.arch
    x = patch if isinstance(patch, Tensor) else Tensor(patch)
    single = x.ndim == 3
    if single:
        x = x.reshape(1, *x.shape)
    expected = (arch.in_channels, arch.patch_size, arch.patch_size)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ShapeError(f"expected patches of shape {expected}, got {tuple(patch.shape)}")

    p = weights.params
    for i, spec in enumerate(arch.layers):
        n = i + 1
        y = F.conv2d(x, p[f"conv{n}.weight"], p[f"conv{n}.bias"], spec.stride, spec.dilation, spec.padding)
        if spec.norm == "cin":
            y = cin_forward(y, modality, weights.cin(n))
        if spec.hyper:
            y = hyper_module_forward(x, y, weights.hyper(n))
        if spec.norm == "bn":
            y = F.batch_norm(
                y, p[f"bn{n}.gamma"], p[f"bn{n}.beta"], mode,
                weights.buffers[f"bn{n}.running_mean"], weights.buffers[f"bn{n}.running_var"],
            )
        x = F.gelu(y)
        if trace is not None:
            trace.append((f"layer{n}", x.shape[1:], float(x.data.std())))

    flat = F.flatten(x)
    if trace is not None:
        trace.append(("flatten", flat.shape[1:], float(flat.data.std())))
    flat = F.dropout(flat, arch.dropout, mode, rng)
    out = F.fully_connected(flat, p["fc.weight"], p["fc.bias"])
    return out.reshape(out.shape[1]) if single else out
