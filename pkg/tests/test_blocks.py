import numpy as np
import pytest

from revft import blocks as B
from revft.analysis import gradcheck_blocks
from revft.exceptions import ShapeMismatch
from revft.tensor import gaussian_fill, layer_norm, make_rng


def zero_attention(d, heads=2, causal=False):
    z = np.zeros((d, d))
    return B.AttentionParams(z, z.copy(), z.copy(), z.copy(), np.ones(d), np.zeros(d), heads, causal)


def zero_mlp(d):
    return B.MlpParams(np.zeros((d, 4 * d)), np.zeros((4 * d, d)), np.ones(d), np.zeros(d))


def ln(x):
    return layer_norm(x, np.ones(x.shape[-1]), np.zeros(x.shape[-1]), B.LN_EPS)[0]


def test_adapter_zero_up_projection(rng):
    p = B.AdapterParams(gaussian_fill((4, 2), 0, 1, rng), np.zeros((2, 4)))
    x = gaussian_fill((2, 3, 4), 0, 1, rng)
    assert not B.adapter_apply(x, p).any()


def test_adapter_hand_case():
    p = B.AdapterParams(np.array([[1.0], [1.0]]), np.array([[1.0, 0.0]]))
    assert np.array_equal(B.adapter_apply(np.array([[[1.0, 2.0]]]), p), [[[3.0, 0.0]]])


def test_adapter_small_at_init():
    rng = make_rng(0)
    p = B.init_adapter(64, 8, rng, sigma=0.02)
    x = gaussian_fill((2, 16, 64), 0, 1, rng)
    # measured ratio is about 1e-3
    assert np.linalg.norm(B.adapter_apply(x, p)) / np.linalg.norm(x) <= 0.01


def test_adapter_shape_errors():
    p = B.init_adapter(4, 2, make_rng(0))
    with pytest.raises(ShapeMismatch):
        B.adapter_apply(np.ones((1, 1, 5)), p)
    with pytest.raises(ShapeMismatch):
        B.AdapterParams(np.ones((4, 2)), np.ones((3, 4)))


def test_attention_zero_weights_is_layer_norm(rng):
    x = gaussian_fill((2, 3, 4), 0, 1, rng)
    assert np.allclose(B.attention_block_apply(x, zero_attention(4)), ln(x), atol=1e-15)


def test_attention_single_position_probs(rng):
    p = B.init_attention(4, 2, rng)
    cache = B.BlockCache()
    B.attention_block_apply(gaussian_fill((3, 1, 4), 0, 1, rng), p, None, cache)
    assert np.array_equal(cache["probs"], np.ones((3, 2, 1, 1)))


def test_attention_causal_mask(rng):
    p = B.init_attention(4, 2, rng, causal=True)
    x = gaussian_fill((1, 4, 4), 0, 1, rng)
    y = B.attention_block_apply(x, p)
    x2 = x.copy()
    x2[0, 3] += 1.0  # only the last position may change
    y2 = B.attention_block_apply(x2, p)
    assert np.array_equal(y[0, :3], y2[0, :3])
    assert not np.array_equal(y[0, 3], y2[0, 3])


def test_attention_head_mismatch():
    with pytest.raises(ShapeMismatch):
        B.init_attention(6, 4, make_rng(0))


def test_mlp_zero_weights(rng):
    x = gaussian_fill((2, 3, 4), 0, 1, rng)
    assert np.allclose(B.mlp_block_apply(x, zero_mlp(4)), ln(x), atol=1e-15)
    a = B.init_adapter(4, 2, rng, sigma=0.5)
    assert np.array_equal(B.mlp_block_apply(x, zero_mlp(4), a), ln(x + B.adapter_apply(x, a)))


def test_plm_layer_composition(rng):
    x = gaussian_fill((2, 3, 4), 0, 1, rng)
    assert np.allclose(B.plm_layer_apply(x, zero_attention(4), zero_mlp(4)), ln(ln(x)), atol=1e-15)
    layer = B.init_plm_layer(4, 2, rng, ln_std=0.2)
    a = B.init_adapter(4, 2, rng)
    seq = B.mlp_block_apply(B.attention_block_apply(x, layer.attn), layer.mlp, a)
    assert np.array_equal(B.plm_layer_apply(x, layer.attn, layer.mlp, a), seq)


def test_embedding_lookup_and_positions():
    d = 4
    tok = np.zeros((4, d))
    tok[np.arange(4), np.arange(4)] = 2.0
    tok -= tok.mean(axis=1, keepdims=True)
    tok /= tok.std(axis=1, keepdims=True)  # rows already normalized
    p = B.EmbeddingParams(tok, np.zeros((3, d)), np.ones(d), np.zeros(d))
    y = B.embed_apply(np.array([[2, 0, 3]]), p)
    assert np.allclose(y[0], tok[[2, 0, 3]], atol=1e-5)

    rng = make_rng(1)
    p = B.init_embedding(5, 4, d, rng)
    z = p.tok[np.array([[1, 1]])] + p.pos[:2]
    assert np.allclose(z[0, 1] - z[0, 0], p.pos[1] - p.pos[0], rtol=0, atol=1e-15)


def test_embedding_errors():
    p = B.init_embedding(5, 3, 4, make_rng(0))
    with pytest.raises(ShapeMismatch):
        B.embed_apply(np.array([[5]]), p)
    with pytest.raises(ShapeMismatch):
        B.embed_apply(np.zeros((1, 4), dtype=int), p)


def test_embedding_gradient_accumulates(rng):
    p = B.init_embedding(5, 4, 4, rng)
    cache = B.BlockCache()
    tokens = np.array([[1, 1, 1, 2]])
    B.embed_apply(tokens, p, cache)
    dy = np.ones((1, 4, 4))
    g = B.embed_backward(cache, dy, p)
    assert not g["tok"][0].any() and g["tok"][1].any()


def test_classify_head_zero_weight(rng):
    head = B.ClassifierHead(np.zeros((4, 3)), np.array([0.5, -1.0, 2.0]))
    logits = B.head_apply(gaussian_fill((2, 5, 4), 0, 1, rng), "classify", head)
    assert np.array_equal(logits, np.tile(head.b, (2, 1)))


def test_lm_tied_orthonormal_argmax():
    q, _ = np.linalg.qr(make_rng(2).standard_normal((6, 6)))
    p = B.EmbeddingParams(q, np.zeros((2, 6)), np.ones(6), np.zeros(6))
    h = q[[3, 1]][None]
    assert list(B.head_apply(h, "lm_tied", p).argmax(-1)[0]) == [3, 1]


def test_head_mode_errors(rng):
    with pytest.raises(ShapeMismatch):
        B.head_apply(np.zeros((1, 2, 4)), "pooler", None)
    with pytest.raises(ShapeMismatch):
        B.head_apply(np.zeros((1, 2, 4)), "classify", B.init_embedding(3, 2, 4, rng))


def test_cache_does_not_change_output(rng):
    layer = B.init_plm_layer(8, 2, rng, ln_std=0.2)
    a = B.init_adapter(8, 2, rng)
    x = gaussian_fill((2, 4, 8), 0, 1, rng)
    cache = B.BlockCache()
    assert np.array_equal(B.plm_layer_apply(x, layer.attn, layer.mlp, a, cache),
                          B.plm_layer_apply(x, layer.attn, layer.mlp, a))
    assert cache.nbytes == sum(arr.nbytes for _, arr in cache.tensors())
    cache.clear()
    assert cache.nbytes == 0


@pytest.mark.parametrize("seed", [0, 1])
def test_blocks_match_finite_differences(seed):
    for check in gradcheck_blocks(seed, d=8, heads=2):
        assert check.passed, check.line()


def test_blocks_finite_differences_wider():
    for check in gradcheck_blocks(3, d=16, heads=4, batch=1, seq=4):
        assert check.passed, check.line()
