import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from lift.conditioning import (ConditioningConfig, ConditioningModule, TemporalFeatures, inject, rel_bucket,
                               temporal_features)
from lift.errors import DimMismatch
from lift.tokenspace import EncodedExample

CFG = ConditioningConfig(d_model=16, n_labels=12, p_max=2048, r_buckets=64, t_max=512, d_embed=8, d_hidden=16)


def fake_encoded(L, timestep=37, gid=4):
    ids = np.arange(L) % 5
    out = np.zeros(L, dtype=bool)
    out[-2:] = True
    stamp = np.where(out, gid, 0)
    z = np.zeros(L, dtype=bool)
    return EncodedExample(ids, L - 2, ~out, out, z, np.zeros(L, dtype=np.int64), stamp, np.zeros(L, dtype=np.int64),
                          timestep, gid)


def test_positions_and_buckets():
    f = temporal_features(fake_encoded(10), CFG)
    assert f.abs_pos[0] == 0
    assert f.abs_pos[-1] == 9
    assert f.rel_bucket[-1] == 0
    assert (np.diff(f.rel_bucket) <= 0).all()


def test_timestep_broadcast_and_stamps():
    f = temporal_features(fake_encoded(9, timestep=37, gid=4), CFG)
    assert (f.timestep == 37).all()
    assert f.label.tolist() == [0] * 7 + [4, 4]


def test_features_clamp():
    small = ConditioningConfig(d_model=16, n_labels=3, p_max=8, r_buckets=4, t_max=5, d_embed=4, d_hidden=8)
    f = temporal_features(fake_encoded(20, timestep=99, gid=7), small)
    assert f.abs_pos.max() == 7
    assert f.rel_bucket.max() <= 3
    assert f.timestep.max() == 4
    assert f.label.max() == 2


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 10**6), min_size=1, max_size=30))
def test_rel_bucket_monotone_and_in_range(dists):
    d = np.sort(np.asarray(dists))
    b = rel_bucket(d, 2048, 64)
    assert (b >= 0).all() and (b <= 63).all()
    assert (np.diff(b) >= 0).all()
    assert ((d == 0) == (b == 0)).all()


def test_zero_output_map_is_identity():
    mod = ConditioningModule(CFG, seed=0)
    x = torch.randn(11, 16)
    f = temporal_features(fake_encoded(11), CFG)
    assert torch.equal(inject(x, f, mod), x)


@pytest.mark.parametrize("L", [1, 7, 33])
def test_shape_preserved(L):
    mod = ConditioningModule(CFG, seed=0)
    with torch.no_grad():
        mod.out.weight.normal_()
    x = torch.randn(L, 16)
    y = mod(x, _features(L))
    assert y.shape == (L, 16)


def _features(L):
    t = np.arange(L)
    return TemporalFeatures(t, rel_bucket(L - 1 - t), np.zeros(L, dtype=np.int64), np.full(L, 2))


def test_dim_mismatch():
    mod = ConditioningModule(CFG)
    with pytest.raises(DimMismatch):
        inject(torch.randn(5, 15), _features(5), mod)
    with pytest.raises(DimMismatch):
        inject(torch.randn(5, 16), _features(4), mod)


def test_gradient_matches_finite_differences():
    mod = ConditioningModule(CFG, seed=2).double()
    with torch.no_grad():
        mod.out.weight.normal_(std=0.3)
    f = _features(6)
    x = torch.randn(6, 16, dtype=torch.float64)
    w = mod.out.weight

    def loss():
        return inject(x, f, mod).pow(2).sum()

    loss().backward()
    analytic = w.grad.clone()
    eps = 1e-6
    rng = np.random.RandomState(0)
    for i, j in zip(rng.randint(16, size=10), rng.randint(16, size=10)):
        with torch.no_grad():
            w[i, j] += eps
            up = loss().item()
            w[i, j] -= 2 * eps
            down = loss().item()
            w[i, j] += eps
        assert abs((up - down) / (2 * eps) - analytic[i, j].item()) < 1e-4


def test_gradient_reaches_tables_once_output_is_nonzero():
    mod = ConditioningModule(CFG, seed=2)
    with torch.no_grad():
        mod.out.weight.normal_(std=0.1)
    inject(torch.randn(4, 16), _features(4), mod).sum().backward()
    assert mod.abs_emb.weight.grad.abs().sum() > 0
