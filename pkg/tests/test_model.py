import math
import time

import numpy as np
import pytest

from hypnet import model as M
from hypnet.tensor import ShapeError, Tensor


def _patch(seed=0, n=None):
    rng = np.random.default_rng(seed)
    shape = (1, 64, 64) if n is None else (n, 1, 64, 64)
    return Tensor(rng.uniform(-1, 1, size=shape))


def count_parameters(arch):
    """Parameter count from the layer table, coded independently of init_weights."""
    total, c_in = 0, arch.in_channels
    for spec in arch.layers:
        c_out = spec.channels
        total += c_out * c_in * 9 + c_out
        if spec.norm == "cin":
            total += 4 * c_out
        elif spec.norm == "bn":
            total += 2 * c_out
        if spec.hyper:
            width = c_in // 8
            total += width * c_in + width + 2 * (c_out * width + c_out)
        c_in = c_out
    size = arch.patch_size
    for spec in arch.layers:
        size = (size + 2 * spec.padding - 2 * spec.dilation - 1) // spec.stride + 1
    return total + c_in * size * size * 128 + 128


def test_layer_table():
    arch = M.DEFAULT_ARCH
    assert [s.channels for s in arch.layers] == [32, 32, 64, 64, 128, 128, 128, 128]
    assert [s.stride for s in arch.layers] == [1, 2, 1, 2, 1, 2, 1, 1]
    assert [s.dilation for s in arch.layers] == [1, 1, 2, 1, 2, 1, 1, 1]
    assert [s.norm for s in arch.layers] == ["cin"] * 3 + ["bn"] * 4 + [None]
    assert [s.hyper for s in arch.layers] == [False] * 3 + [True] * 5
    assert arch.spatial_trace() == [64, 32, 32, 16, 16, 8, 8, 8]
    assert arch.flatten_dim == 8192


def test_forward_shape_trace_and_speed():
    weights = M.init_weights(0)
    trace = []
    start = time.perf_counter()
    out = M.hypnet_forward(_patch(), 0, weights, "eval", trace=trace)
    elapsed = time.perf_counter() - start
    assert out.shape == (128,)
    channels = [shape[0] for name, shape, _ in trace if name.startswith("layer")]
    spatial = [shape[1] for name, shape, _ in trace if name.startswith("layer")]
    assert channels == [32, 32, 64, 64, 128, 128, 128, 128]
    assert spatial == [64, 32, 32, 16, 16, 8, 8, 8]
    assert trace[-1][0] == "flatten" and trace[-1][1] == (8192,)
    assert elapsed < 1.0


def test_parameter_count_matches_table():
    weights = M.init_weights(0)
    assert weights.n_parameters == count_parameters(M.DEFAULT_ARCH) == 1_655_456
    bare = M.init_weights(0, M.DEFAULT_ARCH.without_hyper())
    assert bare.n_parameters == count_parameters(M.DEFAULT_ARCH.without_hyper())


def test_bottleneck_widths():
    arch = M.DEFAULT_ARCH
    assert [arch.bottleneck_width(i) for i in range(3, 8)] == [8, 8, 16, 16, 16]
    weights = M.init_weights(0)
    assert weights["hyper6.bneck.weight"].shape == (16, 128)


def test_init_deterministic_and_seed_dependent():
    a, b, c = M.init_weights(3), M.init_weights(3), M.init_weights(4)
    for name in a.params:
        np.testing.assert_array_equal(a[name].data, b[name].data)
    assert not np.array_equal(a["conv1.weight"].data, c["conv1.weight"].data)


def test_init_activation_scale_probe():
    trace = []
    M.hypnet_forward(_patch(1, n=4), 0, M.init_weights(0), "train", np.random.default_rng(0), trace=trace)
    for name, _, std in trace:
        assert 0.1 <= std <= 10.0, (name, std)


def test_hyper_init_is_pure_half_scaling():
    weights = M.init_weights(0)
    x = Tensor(np.random.default_rng(2).normal(size=(2, 64, 16, 16)))
    s, t = M.hyper_gates(x, weights.hyper(4))
    np.testing.assert_array_equal(s.data, 0.5)
    np.testing.assert_array_equal(t.data, 0.0)
    y = Tensor(np.random.default_rng(3).normal(size=(2, 64, 8, 8)))
    np.testing.assert_allclose(M.hyper_module_forward(x, y, weights.hyper(4)).data, y.data / 2)


def test_hyper_module_matches_straight_line_oracle(f64):
    rng = np.random.default_rng(4)
    c_in, c_out, width = 16, 5, 2
    x, y = rng.normal(size=(c_in, 6, 6)), rng.normal(size=(c_out, 3, 3))
    raw = [rng.normal(size=s) for s in [(width, c_in), (width,), (c_out, width), (c_out,), (c_out, width), (c_out,)]]
    params = M.HyperModuleParams(*[Tensor(a) for a in raw])
    out = M.hyper_module_forward(Tensor(x), Tensor(y), params).data

    pooled = x.mean(axis=(1, 2))
    h = raw[0] @ pooled + raw[1]
    h = np.array([v * 0.5 * (1 + math.erf(v / math.sqrt(2))) for v in h])
    s = 1.0 / (1.0 + np.exp(-(raw[2] @ h + raw[3])))
    t = raw[4] @ h + raw[5]
    np.testing.assert_allclose(out, s[:, None, None] * y + t[:, None, None], atol=1e-6)
    assert np.all((s > 0) & (s < 1))


def test_hyper_module_channel_mismatch(f64):
    params = M.init_weights(0).hyper(4)
    with pytest.raises(ShapeError):
        M.hyper_module_forward(Tensor(np.ones((1, 16, 4, 4))), Tensor(np.ones((1, 64, 2, 2))), params)


def test_cin_examples(f64):
    x = Tensor(np.random.default_rng(5).normal(size=(3, 4, 4)))
    ones, zeros = Tensor(np.ones(3)), Tensor(np.zeros(3))
    plain = M.CinParams((ones, ones), (zeros, zeros))
    np.testing.assert_array_equal(M.cin_forward(x, 0, plain).data, M.cin_forward(x, 1, plain).data)
    const = M.CinParams((Tensor(np.zeros(3)), ones), (Tensor(np.full(3, 2.5)), zeros))
    np.testing.assert_allclose(M.cin_forward(x, 0, const).data, 2.5)
    distinct = M.CinParams((Tensor(np.full(3, 2.0)), ones), (Tensor(np.full(3, 0.3)), zeros))
    assert np.abs(M.cin_forward(x, 0, distinct).data - M.cin_forward(x, 1, distinct).data).max() > 0
    with pytest.raises(ValueError):
        M.cin_forward(x, 2, plain)


def test_eval_forward_is_deterministic():
    weights, patch = M.init_weights(1), _patch(2)
    a = M.hypnet_forward(patch, 1, weights).data
    b = M.hypnet_forward(patch, 1, weights).data
    assert a.tobytes() == b.tobytes()


def test_modality_conditioning_and_weight_sharing():
    weights, patch = M.init_weights(1), _patch(3)
    base0 = M.hypnet_forward(patch, 0, weights).data.copy()
    base1 = M.hypnet_forward(patch, 1, weights).data.copy()
    # freshly initialized CIN is symmetric: both branches agree
    np.testing.assert_array_equal(base0, base1)

    weights["cin1.gamma0"].data += 0.3
    weights["cin2.beta0"].data -= 0.2
    moved0 = M.hypnet_forward(patch, 0, weights).data
    assert np.abs(moved0 - base0).max() > 0
    # modality-1 descriptors are untouched by modality-0 CIN parameters
    assert M.hypnet_forward(patch, 1, weights).data.tobytes() == base1.tobytes()

    # a shared parameter moves both branches
    weights["conv5.weight"].data *= 1.1
    assert np.abs(M.hypnet_forward(patch, 1, weights).data - base1).max() > 0


def test_only_cin_parameters_are_modality_specific():
    names = list(M.init_weights(0).params)
    specific = [n for n in names if n[-1] in "01" and ("gamma" in n or "beta" in n)]
    assert all(n.startswith("cin") for n in specific)
    assert len(specific) == 3 * 4


def test_layer8_has_hyper_but_no_bn():
    names = set(M.init_weights(0).params)
    assert "hyper8.scale.weight" in names
    assert not any(n.startswith("bn8") for n in names)


def test_forward_shape_errors():
    weights = M.init_weights(0)
    with pytest.raises(ShapeError):
        M.hypnet_forward(Tensor(np.zeros((1, 32, 32))), 0, weights)
    with pytest.raises(ShapeError):
        M.hypnet_forward(Tensor(np.zeros((2, 64, 64))), 0, weights)
    with pytest.raises(ValueError):
        M.hypnet_forward(_patch(), 3, weights)


def test_batched_eval_equals_single_patches():
    weights = M.init_weights(2)
    batch = _patch(4, n=3)
    out = M.hypnet_forward(batch, 0, weights).data
    for k in range(3):
        np.testing.assert_allclose(out[k], M.hypnet_forward(Tensor(batch.data[k]), 0, weights).data, rtol=1e-4, atol=1e-5)


def test_normalize_patches_range():
    u8 = np.array([[0, 127, 255]], dtype=np.uint8)
    np.testing.assert_allclose(M.normalize_patches(u8), [[-1.0, 127 / 127.5 - 1, 1.0]])


def test_state_roundtrip_and_copy_independence():
    w = M.init_weights(0)
    c = w.copy()
    c["fc.bias"].data += 1.0
    assert not np.array_equal(c["fc.bias"].data, w["fc.bias"].data)
    w.load_state({k: v.copy() for k, v in c.state().items()})
    np.testing.assert_array_equal(c["fc.bias"].data, w["fc.bias"].data)
    bad = dict(c.state())
    bad.pop("fc.bias")
    with pytest.raises(KeyError):
        w.load_state(bad)
