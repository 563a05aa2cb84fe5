import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tnt import autodiff as ad
from tnt.autodiff import Tensor
from tnt.checks import attention_oracle_configs, naive_attention
from tnt.gradcheck import check_parameters
from tnt.nn import BlockParams, MsaParams, block_forward, drop_path, msa_forward, named_tensors


class AlwaysDrop:
    """rng stand-in whose draws never fall below the keep probability."""

    def random(self, shape):
        return np.ones(shape)


def randomized_msa(rng, dim, heads, scale=0.5):
    p = MsaParams.init(rng, dim, heads)
    for lin in (p.q, p.k, p.v, p.o):
        lin.weight.data = rng.normal(0, scale, lin.weight.shape)
        lin.bias.data = rng.normal(0, scale, lin.bias.shape)
    return p


def randomized_block(rng, dim=8, heads=2, rate=0.0):
    p = BlockParams.init(rng, dim, heads, 4, rate)
    for _, t in named_tensors(p):
        t.data = t.data + rng.normal(0, 0.2, t.shape)
    return p


def test_single_token_map_is_one(rng):
    p = randomized_msa(rng, 6, 2, scale=3.0)
    _, maps = msa_forward(Tensor(rng.normal(size=(1, 6))), p)
    assert np.array_equal(maps, np.ones((2, 1, 1)))


def test_zero_input_zero_bias_gives_zero_output_uniform_maps(rng):
    p = randomized_msa(rng, 8, 2)
    for lin in (p.q, p.k, p.v, p.o):
        lin.bias.data[:] = 0.0
    out, maps = msa_forward(Tensor(np.zeros((5, 8))), p)
    assert np.array_equal(out.data, np.zeros((5, 8)))
    assert np.allclose(maps, 1 / 5, rtol=0, atol=1e-15)


def test_four_token_two_head_case_matches_oracle(rng):
    p = randomized_msa(rng, 6, 2)
    x = rng.normal(size=(4, 6))
    out, maps = msa_forward(Tensor(x), p)
    ref_out, ref_maps = naive_attention(x, p)
    assert np.abs(out.data - ref_out).max() < 1e-10
    assert np.abs(maps - ref_maps).max() < 1e-10


def test_oracle_over_all_small_configs(rng):
    for n_seq, dim, heads in attention_oracle_configs():
        p = randomized_msa(rng, dim, heads)
        x = rng.normal(size=(n_seq, dim))
        out, maps = msa_forward(Tensor(x), p)
        ref_out, ref_maps = naive_attention(x, p)
        assert np.abs(out.data - ref_out).max() < 1e-10, (n_seq, dim, heads)
        assert np.abs(maps - ref_maps).max() < 1e-10, (n_seq, dim, heads)


def test_attention_maps_row_stochastic(rng):
    p = randomized_msa(rng, 8, 4, scale=2.0)
    _, maps = msa_forward(Tensor(rng.normal(size=(3, 7, 8))), p)
    assert maps.shape == (3, 4, 7, 7)
    assert np.all(maps >= 0)
    assert np.abs(maps.sum(axis=-1) - 1).max() < 1e-12


def test_heads_must_divide_dim(rng):
    with pytest.raises(ValueError):
        MsaParams.init(rng, 6, 4)


def test_forced_drop_is_identity(rng):
    p = randomized_block(rng, rate=1 - 1e-9)
    x = rng.normal(size=(5, 8))
    out = block_forward(Tensor(x), p, rng=AlwaysDrop(), training=True)
    assert np.array_equal(out.data, x)


def test_drop_path_zero_rate_train_equals_eval(rng):
    p = randomized_block(rng, rate=0.0)
    x = Tensor(rng.normal(size=(2, 5, 8)))
    a = block_forward(x, p, rng=np.random.default_rng(0), training=True).data
    b = block_forward(x, p, training=False).data
    assert np.array_equal(a, b)


def test_drop_path_is_per_sample_and_rescaled(rng):
    branch = Tensor(np.ones((400, 3, 2)))
    out = drop_path(branch, 0.25, np.random.default_rng(3), training=True).data
    per_sample = out[:, 0, 0]
    assert np.all((out == out[:, :1, :1]))  # whole sample kept or dropped
    assert set(np.unique(per_sample)) <= {0.0, 1 / 0.75}
    assert abs(per_sample.mean() - 1.0) < 0.1
    assert drop_path(branch, 0.25, None, training=False) is branch


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 7), st.integers(0, 2**32 - 1))
def test_block_is_permutation_equivariant(n_seq, seed):
    rng = np.random.default_rng(seed)
    p = randomized_block(rng)
    x = rng.normal(size=(n_seq, 8))
    perm = rng.permutation(n_seq)
    a = block_forward(Tensor(x[perm]), p).data
    b = block_forward(Tensor(x), p).data[perm]
    assert np.abs(a - b).max() < 1e-10


def test_block_gradient(rng):
    p = randomized_block(rng)
    x = Tensor(rng.normal(size=(5, 8)), requires_grad=True)
    w = Tensor(rng.uniform(-1, 1, (5, 8)))
    errs = check_parameters(lambda: ad.sum_(ad.multiply(block_forward(x, p), w)),
                            [("x", x)] + list(named_tensors(p, "block")))
    assert max(errs.values()) < 1e-4, errs


def test_batched_block_matches_per_sample(rng):
    p = randomized_block(rng)
    x = rng.normal(size=(3, 4, 8))
    batched = block_forward(Tensor(x), p).data
    for i in range(3):
        assert np.allclose(batched[i], block_forward(Tensor(x[i]), p).data, rtol=0, atol=1e-13)
