import copy

import numpy as np
import pytest

from tnt import autodiff as ad
from tnt.autodiff import Tensor
from tnt.block import TntBlockParams, fuse_words, se_gate, tnt_forward, vanilla_forward
from tnt.checks import check_tnt_block
from tnt.gradcheck import numeric_grad, relative_error
from tnt.model import build, forward_features, preset
from tnt.nn import block_forward, named_tensors

N, M, C, D = 3, 4, 8, 32


def make(rng, se=False, fusion_ln=True, noise=0.2):
    p = TntBlockParams.init(rng, M, C, D, 2, 4, se=se, fusion_ln=fusion_ln)
    for _, t in named_tensors(p):
        t.data = t.data + rng.normal(0, noise, t.shape)
    return p


def inputs(rng, batch=()):
    return Tensor(rng.normal(size=(*batch, N, M, C))), Tensor(rng.normal(size=(*batch, N + 1, D)))


def silence(block):
    """Make a pre-norm block the identity by zeroing both branch outputs."""
    for lin in (block.msa.o, block.mlp.fc2):
        lin.weight.data[:] = 0
        lin.bias.data[:] = 0


def test_zero_fusion_leaves_pure_outer_step(rng):
    p = make(rng)
    p.fusion.weight.data[:] = 0
    p.fusion.bias.data[:] = 0
    y, z = inputs(rng)
    _, z2 = tnt_forward(y, z, p)
    assert np.array_equal(z2.data, block_forward(z, p.outer).data)
    # and the words no longer matter
    _, z3 = tnt_forward(Tensor(rng.normal(size=y.shape)), z, p)
    assert np.array_equal(z2.data, z3.data)


def test_class_row_gets_no_fusion_term(rng):
    p = make(rng)
    silence(p.outer)
    y, z = inputs(rng)
    y2, z2 = tnt_forward(y, z, p)
    assert np.array_equal(z2.data[0], z.data[0])
    assert np.allclose(z2.data[1:], z.data[1:] + fuse_words(y2, p).data, rtol=0, atol=1e-13)


@pytest.mark.parametrize("se", [False, True])
def test_sentence_permutation_equivariance(rng, se):
    p = make(rng, se=se)
    y, z = inputs(rng)
    perm = np.array([2, 0, 1])
    y2, z2 = tnt_forward(y, z, p)
    zp = np.concatenate([z.data[:1], z.data[1:][perm]])
    y3, z3 = tnt_forward(Tensor(y.data[perm]), Tensor(zp), p)
    assert np.abs(y3.data - y2.data[perm]).max() < 1e-10
    assert np.abs(z3.data[0] - z2.data[0]).max() < 1e-10
    assert np.abs(z3.data[1:] - z2.data[1:][perm]).max() < 1e-10


def test_plain_block_is_inner_fuse_outer(rng):
    p = make(rng, se=True)
    plain = copy.deepcopy(p)
    plain.se = None
    y, z = inputs(rng)
    y2, z2 = tnt_forward(y, z, plain)
    y_ref = block_forward(y, plain.inner)
    fused = fuse_words(y_ref, plain)
    z_ref = block_forward(ad.add(z, ad.concat([Tensor(np.zeros((1, D))), fused], axis=0)), plain.outer)
    assert np.array_equal(y2.data, y_ref.data)
    assert np.array_equal(z2.data, z_ref.data)
    # SE changes the result when present
    _, z_se = tnt_forward(y, z, p)
    assert not np.allclose(z_se.data, z2.data)


def test_se_gate_scales_each_dimension_by_value_in_unit_interval(rng):
    p = make(rng, se=True)
    x = Tensor(rng.normal(size=(N + 1, D)))
    gated = se_gate(x, p.se.sent_fc1, p.se.sent_fc2).data
    ratio = gated / x.data
    assert np.allclose(ratio, ratio[:1], rtol=1e-12)  # same gate for every token
    assert np.all((ratio > 0) & (ratio < 1))


def test_fusion_uses_row_major_word_flattening(rng):
    p = make(rng, fusion_ln=False)
    assert M * C == D
    p.fusion.weight.data = np.eye(D)
    p.fusion.bias.data[:] = 0
    y = rng.normal(size=(N, M, C))
    out = fuse_words(Tensor(y), p).data
    expect = [[y[i, j, k] for j in range(M) for k in range(C)] for i in range(N)]
    assert np.array_equal(out, expect)


def test_inner_weight_gradient_is_sum_over_sentences(rng):
    p = make(rng)
    y, z = inputs(rng)
    w = rng.uniform(-1, 1, size=(N, M, C))
    weight = p.inner.mlp.fc1.weight

    def word_loss(y_in, wts):
        y2 = block_forward(y_in, p.inner)
        return ad.sum_(ad.multiply(y2, Tensor(wts)))

    weight.grad = None
    ad.backward(word_loss(y, w))
    total = weight.grad.copy()
    parts = np.zeros_like(total)
    for i in range(N):
        weight.grad = None
        ad.backward(word_loss(Tensor(y.data[i]), w[i]))
        parts += weight.grad
    weight.grad = None
    assert np.allclose(total, parts, rtol=1e-12, atol=1e-15)
    idx = np.arange(0, weight.size, 37)
    with ad.no_grad():
        fd = numeric_grad(lambda: float(word_loss(y, w).data), weight.data, indices=idx)
    assert relative_error(total.reshape(-1)[idx], fd) < 1e-4


def test_tnt_block_gradient_every_group():
    results = check_tnt_block()
    groups = {r.name.split(".", 1)[1] for r in results}
    assert groups == {"Y", "Z", "inner", "fusion_ln", "fusion", "outer", "se"}
    for r in results:
        assert r.passed, (r.name, r.error)


def test_vanilla_layer_leaves_words_untouched(micro_image):
    model = build(preset("tnt-micro", tnt_block_indices=[1, 3]), seed=0)
    _, _, words = forward_features(model, micro_image[None])
    assert words[2] is words[1]
    assert np.array_equal(words[4].data, words[3].data)
    assert not np.array_equal(words[1].data, words[0].data)


def test_vanilla_forward_matches_block(rng):
    p = make(rng).outer
    z = Tensor(rng.normal(size=(N + 1, D)))
    trace = {}
    out = vanilla_forward(z, p, trace=trace)
    assert np.array_equal(out.data, block_forward(z, p).data)
    assert trace["outer"].shape == (4, N + 1, N + 1)


def test_shape_mismatch_rejected(rng):
    p = make(rng)
    with pytest.raises(ad.DimensionError):
        tnt_forward(Tensor(np.zeros((N, M, C))), Tensor(np.zeros((N, D))), p)
