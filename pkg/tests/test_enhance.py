import numpy as np
import pytest
import torch

from dipforge.data import ingest_dataset, load_png, to_uint8
from dipforge.enhance import (
    EnhancerConfig, EnhancerModel, build_enhancer_net, enhance_dataset, soften, train_enhancer,
)
from dipforge.model import ConfigError, build_student
from dipforge.toyset import write_toyset
from dipforge.training import windowed_mean


def perturbed_enhancer(seed=0, amount=0.02):
    torch.manual_seed(seed)
    net = build_enhancer_net(width=8, blocks=1)
    with torch.no_grad():
        net.upsampler.weight.normal_(0, amount)
    return net


def test_identity_init_reproduces_hr(tiny_ds):
    m = EnhancerModel(build_enhancer_net(8, 1), strength=1.0)
    for hr in tiny_ds.hr:
        assert np.array_equal(to_uint8(m(hr)), to_uint8(hr))


def test_zero_strength_is_byte_identical_after_png(tiny_ds, tmp_path):
    m = EnhancerModel(perturbed_enhancer(), strength=0.0)
    out = enhance_dataset(tiny_ds, m, out_dir=tmp_path)
    for name, hr, e in zip(tiny_ds.names, tiny_ds.hr, out.enh):
        assert np.array_equal(load_png(tmp_path / name), hr)
        assert np.array_equal(e, hr)
    assert out.meta["enh_strength"] == 0.0 and len(out.meta["enhancer_hash"]) == 64


def test_blend_is_affine_in_strength(tiny_ds):
    m = EnhancerModel(perturbed_enhancer(1, 0.05))
    hr = tiny_ds.hr[0]
    e0, e1 = m(hr, 0.0), m(hr, 1.0)
    for lam in (0.25, 0.5, 0.75):
        expected = lam * e1 + (1 - lam) * e0
        inside = (expected > 0) & (expected < 1)
        assert np.abs(m(hr, lam) - expected)[inside].max() < 1e-6


def test_shape_and_range(tiny_ds):
    m = EnhancerModel(perturbed_enhancer(2, 0.3))
    for hr in tiny_ds.hr:
        e = m(hr)
        assert e.shape == hr.shape and e.min() >= 0 and e.max() <= 1


def test_rejects_non_unit_scale_and_bad_strength():
    with pytest.raises(ConfigError):
        EnhancerModel(build_student(scale=2, width=4, blocks=1))
    with pytest.raises(ConfigError):
        EnhancerModel(build_enhancer_net(4, 1), strength=1.5)


def test_zero_steps_keeps_init(tiny_ds):
    m, trace = train_enhancer(tiny_ds, EnhancerConfig(width=8, blocks=1, steps=0, strength=0.0))
    assert trace == []
    assert np.array_equal(enhance_dataset(tiny_ds, m).enh[0], tiny_ds.hr[0])


def test_soften_keeps_shape_and_blurs(tiny_ds):
    hr = tiny_ds.hr[0]
    s = soften(hr)
    assert s.shape == hr.shape
    grad = lambda im: np.abs(np.diff(im, axis=1)).mean()  # noqa: E731
    assert grad(s) < grad(hr)


def test_written_sidecars_reload_through_ingestion(tiny_dirs, tmp_path):
    ds = ingest_dataset(tiny_dirs["train"], 4)
    out = enhance_dataset(ds, EnhancerModel(perturbed_enhancer(3)), out_dir=tmp_path)
    again = ingest_dataset(tiny_dirs["train"], 4, enh_dir=tmp_path)
    for a, b in zip(out.enh, again.enh):
        assert np.array_equal(a, b)


def test_toy_enhancer_loss_decreases(tmp_path):
    dirs = write_toyset(tmp_path, count=32, val_count=0, size=96, seed=0)
    ds = ingest_dataset(dirs["train"], 4)
    _, trace = train_enhancer(ds, EnhancerConfig(width=16, blocks=2, steps=2000, lr=1e-3, batch_size=8,
                                                 patch_size=32, halve_every=1000))
    assert windowed_mean(trace, "loss", 200, last=True) < windowed_mean(trace, "loss", 200, last=False)
