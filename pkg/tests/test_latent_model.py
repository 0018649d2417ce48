import math
import subprocess
import sys

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from digisc.errors import ConfigurationError, DegenerateInputError
from digisc.latent_model import Architecture, build_model, decode, encode, power_normalize


def test_power_normalize_examples():
    np.testing.assert_allclose(power_normalize([2.0, 0.0]), [math.sqrt(2), 0.0], atol=1e-15)
    np.testing.assert_allclose(power_normalize([1.0, 1.0, 1.0, 1.0]), [1, 1, 1, 1], atol=1e-15)
    # independent arithmetic: sqrt(d / sum x^2) = sqrt(2 / 25)
    np.testing.assert_allclose(power_normalize([3.0, 4.0]), [0.848528137423857, 1.131370849898476], atol=1e-12)


def test_power_normalize_zero():
    with pytest.raises(DegenerateInputError):
        power_normalize(np.zeros(8))


@given(arrays(np.float64, st.integers(1, 64), elements=st.floats(-1e3, 1e3)).filter(lambda a: np.sum(a * a) > 1e-12))
@settings(max_examples=60, deadline=None)
def test_power_normalize_unit_mean_square(a):
    out = power_normalize(a)
    assert abs(np.mean(out**2) - 1) < 1e-9


def test_power_normalize_torch_differentiable():
    x = torch.randn(3, 8, dtype=torch.float64, requires_grad=True)
    y = power_normalize(x)
    assert torch.allclose((y**2).mean(-1), torch.ones(3, dtype=torch.float64))
    y[:, 0].sum().backward()
    assert torch.isfinite(x.grad).all()


def test_encode_zero_image_unit_power():
    m = build_model(seed=0)
    z = encode(np.zeros((32, 32, 3), np.float32), m)
    assert z.shape == (512,)
    assert abs(float(torch.mean(z.detach().double() ** 2)) - 1) < 1e-6


def test_encode_deterministic_and_batched():
    m = build_model(seed=1)
    x = np.random.default_rng(0).random((2, 32, 32, 3)).astype(np.float32)
    with torch.no_grad():
        a, b = encode(x[0], m), encode(x[0], m)
        batch = encode(x, m)
    assert torch.equal(a, b)
    assert torch.allclose(batch[0], a, atol=1e-6)


def test_encode_shape_mismatch():
    with pytest.raises(ConfigurationError):
        encode(np.zeros((16, 16, 3), np.float32), build_model())


def test_decode_range_and_determinism():
    m = build_model(seed=2)
    with torch.no_grad():
        img = decode(torch.zeros(512), m)
        again = decode(torch.zeros(512), m)
    assert img.shape == (32, 32, 3)
    assert float(img.min()) >= 0 and float(img.max()) <= 1
    assert torch.equal(img, again)


def test_decode_length_mismatch():
    with pytest.raises(ConfigurationError):
        decode(torch.zeros(100), build_model())


def test_build_model_leaves_global_rng():
    torch.manual_seed(123)
    expect = torch.rand(3)
    torch.manual_seed(123)
    build_model(seed=5)
    assert torch.equal(torch.rand(3), expect)


def test_encode_byte_identical_across_processes():
    code = (
        "import hashlib, numpy as np, torch\n"
        "from digisc.latent_model import build_model, encode\n"
        "x = np.random.default_rng(0).random((32, 32, 3)).astype(np.float32)\n"
        "with torch.no_grad():\n"
        "    z = encode(x, build_model(seed=11))\n"
        "print(hashlib.sha256(z.numpy().tobytes()).hexdigest())\n"
    )
    runs = [subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout for _ in range(2)]
    assert runs[0] == runs[1] and len(runs[0].strip()) == 64


@pytest.mark.parametrize(
    "kw",
    [dict(image_shape=(30, 32, 3)), dict(latent_dim=511), dict(latent_dim=96 + 2), dict(channels=(1, 2))],
)
def test_architecture_rejects(kw):
    with pytest.raises(ConfigurationError):
        Architecture(**kw)


def test_architecture_roundtrip():
    a = Architecture(latent_dim=256)
    assert Architecture.from_dict(a.to_dict()) == a and a.latent_channels == 4
