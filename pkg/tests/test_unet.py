"""Structure, determinism, and trainability checks for the noise predictor."""

import numpy as np
import pytest

from defectscan import autodiff as ad
from defectscan import unet
from defectscan.errors import ConfigurationError, ContractError, DimensionError
from defectscan.optim import AdamState, adam_step

TINY = unet.UNetConfig(base_channels=8, channel_multipliers=(1,),
                       time_embed_dim=16, groups=4, attention_levels=(True,))


def test_same_seed_identical_parameters():
    a = unet.unet_init(unet.UNetConfig(), seed=7)
    b = unet.unet_init(unet.UNetConfig(), seed=7)
    assert unet.parameter_checksum(a) == unet.parameter_checksum(b)
    c = unet.unet_init(unet.UNetConfig(), seed=8)
    assert unet.parameter_checksum(a) != unet.parameter_checksum(c)


def test_parameter_count_matches_registry():
    m = unet.unet_init(TINY, seed=0)
    assert m.parameter_count == sum(int(np.prod(t.shape)) for t in m.params.values())
    assert m.parameter_count > 0


def test_default_config_downsamples_28_to_7():
    # two stride-2 resamplings: 28 -> 14 -> 7
    from defectscan.autodiff import _conv_geometry
    h = 28
    for _ in unet.UNetConfig().channel_multipliers:
        h, _w = _conv_geometry(h, h, 4, 4, 2, 1)
    assert h == 7


@pytest.mark.parametrize("n", [1, 4])
def test_forward_preserves_shape(n):
    m = unet.unet_init(TINY, seed=1)
    x = np.random.default_rng(n).standard_normal((n, 1, 28, 28)).astype(np.float32)
    y = m.forward(x, np.full(n, 3))
    assert y.data.shape == x.shape


def test_forward_shape_for_default_config():
    m = unet.unet_init(unet.UNetConfig(), seed=1)
    x = np.random.default_rng(0).standard_normal((2, 1, 28, 28)).astype(np.float32)
    assert m.forward(x, 1).data.shape == (2, 1, 28, 28)


def test_time_conditioning_changes_output():
    m = unet.unet_init(TINY, seed=2)
    x = np.random.default_rng(5).standard_normal((1, 1, 28, 28)).astype(np.float32)
    y1 = m.forward(x, 1).data
    y2 = m.forward(x, 900).data
    assert np.max(np.abs(y1 - y2)) > 0


def test_backward_reaches_every_parameter():
    m = unet.unet_init(TINY, seed=3)
    x = np.random.default_rng(0).standard_normal((1, 1, 28, 28)).astype(np.float32)
    with ad.GradientTape() as tape:
        loss = ad.sum_all(m.forward(x, 5))
    ad.backward(loss, tape)
    missing = [name for name, p in m.params.items() if p.grad is None]
    assert missing == []
    for name, p in m.params.items():
        assert p.grad.shape == p.shape, name


def test_forward_validates_timesteps_and_shape():
    m = unet.unet_init(TINY, seed=4)
    x = np.zeros((2, 1, 28, 28), np.float32)
    with pytest.raises(ContractError):
        m.forward(x, 0)
    with pytest.raises(DimensionError):
        m.forward(np.zeros((2, 3, 28, 28), np.float32), 1)
    with pytest.raises(DimensionError):
        m.forward(np.zeros((2, 1, 27, 27), np.float32), 1)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        unet.UNetConfig(base_channels=10, groups=4).validate()
    with pytest.raises(ConfigurationError):
        unet.UNetConfig(channel_multipliers=(1, 2, 4)).validate()  # attn levels mismatch
    with pytest.raises(ConfigurationError):
        unet.UNetConfig(channel_multipliers=(1, 2, 2, 2),
                        attention_levels=(False,) * 4).validate(image_size=28)


def test_registry_rejects_duplicates():
    reg = unet._Registry()
    reg.add("a", np.zeros(3))
    with pytest.raises(ConfigurationError):
        reg.add("a", np.zeros(3))


def test_checkpoint_round_trip(tmp_path):
    m = unet.unet_init(TINY, seed=9)
    x = np.random.default_rng(1).standard_normal((2, 1, 28, 28)).astype(np.float32)
    before = m.forward(x, 4).data
    path = tmp_path / "model.ckpt"
    unet.save_checkpoint(m, str(path), step_count=123, extra={"patch_size": 28})
    loaded, header = unet.load_checkpoint(str(path))
    assert header["step_count"] == 123
    assert header["extra"]["patch_size"] == 28
    assert loaded.config == m.config
    after = loaded.forward(x, 4).data
    assert np.array_equal(before, after)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ContractError):
        unet.load_checkpoint(str(path))


def test_overfit_single_triple():
    """200 Adam steps on one fixed (x, t, eps) triple cut the loss below 10%."""
    m = unet.unet_init(unet.UNetConfig(), seed=11)
    rng = np.random.default_rng(11)
    x = rng.standard_normal((1, 1, 28, 28)).astype(np.float32)
    eps = rng.standard_normal((1, 1, 28, 28)).astype(np.float32)
    target = ad.Tensor(eps)
    state = AdamState(lr=1e-3)
    first = None
    for _ in range(200):
        with ad.GradientTape() as tape:
            loss = ad.mse(m.forward(x, 10), target)
        if first is None:
            first = float(loss.data)
        ad.backward(loss, tape)
        adam_step(m.params, {n: p.grad for n, p in m.params.items()}, state)
        m.zero_grad()
    final = float(loss.data)
    assert final < 0.1 * first, f"loss {first:.4f} -> {final:.4f}"
