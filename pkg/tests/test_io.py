import io
import struct

import numpy as np
import pytest

from hypnet import config as C
from hypnet import model as M
from hypnet import weights_io as W
from hypnet.train import ConfigError


def test_weights_roundtrip_is_bitwise(tmp_path):
    w = M.init_weights(3)
    w.buffers["bn4.running_mean"][:] = np.linspace(-1, 1, 64)
    path = tmp_path / "w.bin"
    W.save_weights(path, w)
    back = W.load_weights(path)
    assert list(back.state()) == list(w.state())
    for name, arr in w.state().items():
        assert back.state()[name].astype("<f4").tobytes() == arr.astype("<f4").tobytes()
    W.save_weights(tmp_path / "again.bin", back)
    assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()


def test_no_hyper_layout_is_inferred(tmp_path):
    w = M.init_weights(0, M.DEFAULT_ARCH.without_hyper())
    W.save_weights(tmp_path / "w.bin", w)
    assert W.load_weights(tmp_path / "w.bin").n_parameters == w.n_parameters


class Spy(io.BytesIO):
    def __init__(self, data):
        super().__init__(data)
        self.reads = 0

    def read(self, n=-1):
        self.reads += 1
        return super().read(n)


def test_bad_magic_fails_before_reading_tensors():
    fh = Spy(b"NOPE" + bytes(100))
    with pytest.raises(W.WeightsFormatError, match="not a weights file"):
        W.read_tensors(fh)
    assert fh.reads == 1


def test_version_and_truncation_errors():
    with pytest.raises(W.WeightsFormatError, match="version 7"):
        W.read_tensors(io.BytesIO(W.MAGIC + struct.pack("<I", 7)))
    buf = io.BytesIO()
    W.write_tensors(buf, {"a": np.ones((2, 3))})
    data = buf.getvalue()
    with pytest.raises(W.WeightsFormatError, match="truncated"):
        W.read_tensors(io.BytesIO(data[:-4]))
    with pytest.raises(W.WeightsFormatError, match="trailing"):
        W.read_tensors(io.BytesIO(data + b"\0"))


def test_missing_tensor_rejected(tmp_path):
    state = dict(M.init_weights(0).state())
    state.pop("fc.weight")
    with open(tmp_path / "w.bin", "wb") as fh:
        W.write_tensors(fh, state)
    with pytest.raises(KeyError):
        W.load_weights(tmp_path / "w.bin")


def test_config_defaults_and_overrides():
    cfg = C.parse("train.cycles = 3  # comment\n\nmodel.use_hyper = no\nextract.t_inter=0.6\n")
    assert cfg.train.cycles == 3 and cfg.model.use_hyper is False
    assert cfg.extract.t_inter == 0.6
    assert cfg.train.lr_max == 1e-2 and cfg.train.margin == 1.0


@pytest.mark.parametrize(
    "text",
    [
        "train.nope = 1",
        "nosection.cycles = 1",
        "train.cycles = many",
        "train.cycles = 1\ntrain.cycles = 2",
        "just words",
        "extract.t_intra = 1.5",
        "run.precision = f16",
        "train.first_cycle_strategy = semi",
    ],
)
def test_config_errors(text):
    with pytest.raises(ConfigError):
        C.parse(text)


def test_config_dump_parse_roundtrip():
    cfg = C.parse("train.cycles = 5\nrun.seed = 11\naugment.p_gamma = 0.25\ncorpus.split_protocol = day-night\n")
    text = C.dump(cfg)
    assert C.parse(text) == cfg
    assert C.dump(C.parse(text)) == text
    assert "train.lr_max = 0.01  # published" in text.splitlines()
    assert "train.batch_size = " in text and "train.batch_size = 32  # published" not in text
