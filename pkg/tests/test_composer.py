import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from intent_cir import composer as cmp

CFG = cmp.ComposerConfig(seed=7)


def straight_line_forward(arrays, cfg, image, tokens):
    """Loop-level re-implementation of the composer forward pass for one input."""
    ps, d = cfg.patch_size, cfg.dim
    keys = []
    k = 0
    for gy in range(cfg.image_size // ps):
        for gx in range(cfg.image_size // ps):
            vec = []
            for y in range(ps):
                for x in range(ps):
                    for c in range(cfg.channels):
                        vec.append(float(image[gy * ps + y, gx * ps + x, c]) - 0.5)
            row = []
            for j in range(d):
                acc = arrays["pos_emb"][k, j]
                for i, v in enumerate(vec):
                    acc += v * arrays["patch_proj"][i, j]
                row.append(acc)
            keys.append(row)
            k += 1
    for t in tokens:
        keys.append([arrays["tok_emb"][t, j] for j in range(d)])
    out = []
    for q in range(cfg.n_queries):
        scores = [sum(arrays["queries"][q, j] * key[j] for j in range(d)) / math.sqrt(d) for key in keys]
        top = max(scores)
        w = [math.exp(s - top) for s in scores]
        tot = sum(w)
        z = [sum(w[m] / tot * keys[m][j] for m in range(len(keys))) for j in range(d)]
        h = [math.tanh(sum(z[j] * arrays["w1"][j, u] for j in range(d)) + arrays["b1"][u]) for u in range(cfg.hidden)]
        out.append([z[j] + sum(h[u] * arrays["w2"][u, j] for u in range(cfg.hidden)) + arrays["b2"][j] for j in range(d)])
    return np.array(out)


@pytest.fixture(scope="module")
def params():
    p = cmp.ComposerParams.init(CFG)
    rng = np.random.default_rng(1)
    # non-zero biases so the oracle exercises every term
    arrays = dict(p.arrays)
    arrays["b1"] = rng.uniform(-0.1, 0.1, CFG.hidden)
    arrays["b2"] = rng.uniform(-0.1, 0.1, CFG.dim)
    return cmp.ComposerParams(CFG, arrays)


@pytest.fixture(scope="module")
def image():
    return np.random.default_rng(2).uniform(size=(32, 32, 3))


def test_init_bounds_and_shapes():
    p = cmp.ComposerParams.init(CFG)
    bound = 1 / math.sqrt(CFG.dim)
    for name, shape in CFG.shapes().items():
        assert p[name].shape == shape
        assert np.all(np.abs(p[name]) <= bound)
    assert not p["b1"].any() and not p["b2"].any()
    assert p.num_parameters() == sum(int(np.prod(s)) for s in CFG.shapes().values())


def test_compose_matches_straight_line_oracle(params, image):
    out = cmp.compose(params, image, (3, 11))
    assert out.shape == (CFG.n_queries, CFG.dim)
    assert np.max(np.abs(out - straight_line_forward(params.arrays, CFG, image, (3, 11)))) < 1e-6


def test_encode_target_matches_oracle(params, image):
    out = cmp.encode_target(params, image)
    assert np.array_equal(out, cmp.compose(params, image, ()))
    assert np.max(np.abs(out - straight_line_forward(params.arrays, CFG, image, ()))) < 1e-6


def test_batched_forward_with_padding_matches_single(params, image):
    images = np.stack([image, image[::-1], image[:, ::-1]])
    toks = [(1,), (2, 5, 14), ()]
    out, _ = cmp.forward(params, images, toks)
    for i in range(3):
        assert np.allclose(out[i], cmp.compose(params, images[i], toks[i]), atol=1e-12)


def test_determinism(params, image):
    assert np.array_equal(cmp.compose(params, image, (4,)), cmp.compose(params, image, (4,)))
    a, b = cmp.ComposerParams.init(CFG), cmp.ComposerParams.init(CFG)
    assert a.equals(b)
    assert not a.equals(cmp.ComposerParams.init(cmp.ComposerConfig(seed=8)))


def test_zero_params_give_zero_output(image):
    out = cmp.compose(cmp.ComposerParams.zeros(CFG), image, (1, 2))
    assert not out.any()


def test_incompatible_inputs_rejected(params):
    with pytest.raises(ValueError):
        cmp.compose(params, np.zeros((30, 30, 3)), ())
    with pytest.raises(ValueError):
        cmp.compose(params, np.zeros((32, 32, 3)), (17,))
    with pytest.raises(ValueError):
        cmp.patchify(np.zeros((1, 30, 30, 3)), 8)


# -- backward ------------------------------------------------------------------


def test_zero_and_doubled_output_grad(params, image):
    out, cache = cmp.forward(params, image[None], [(2, 9)])
    zero = cmp.backward(params, cache, np.zeros_like(out))
    assert all(not g.any() for g in zero.values())
    g = np.random.default_rng(3).normal(size=out.shape)
    one, two = cmp.backward(params, cache, g), cmp.backward(params, cache, 2 * g)
    for n in cmp.PARAM_NAMES:
        assert np.array_equal(two[n], 2 * one[n])


def test_single_weight_finite_difference(params, image):
    """d out[q, j] / d w for a handful of single weights, eps = 1e-4."""
    p = params.copy()
    out, cache = cmp.forward(p, image[None], [(5,)])
    sel = np.zeros_like(out)
    sel[0, 1, 2] = 1.0
    grads = cmp.backward(p, cache, sel)
    eps = 1e-4
    for name, idx in [("w1", (3, 4)), ("w2", (5, 2)), ("queries", (1, 0)), ("patch_proj", (10, 7)), ("tok_emb", (5, 3)), ("pos_emb", (2, 2))]:
        orig = p.arrays[name][idx]
        p.arrays[name][idx] = orig + eps
        up = cmp.forward(p, image[None], [(5,)])[0][0, 1, 2]
        p.arrays[name][idx] = orig - eps
        down = cmp.forward(p, image[None], [(5,)])[0][0, 1, 2]
        p.arrays[name][idx] = orig
        numeric = (up - down) / (2 * eps)
        analytic = grads[name][idx]
        assert abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12) < 1e-4, name


def test_unused_tokens_get_zero_gradient(params, image):
    out, cache = cmp.forward(params, image[None], [(5,)])
    g = cmp.backward(params, cache, np.ones_like(out))
    unused = [t for t in range(CFG.vocab_size) if t != 5]
    assert not g["tok_emb"][unused].any()
    assert g["tok_emb"][5].any()


# -- pooling -------------------------------------------------------------------


def test_pool_examples():
    assert np.allclose(cmp.pool(np.array([[1.0, 0.0], [0.0, 1.0]])), [1 / math.sqrt(2), 1 / math.sqrt(2)], atol=1e-12)
    r = np.array([3.0, -4.0, 12.0])
    assert np.allclose(cmp.pool(np.tile(r, (4, 1))), r / 13.0)
    with pytest.raises(ValueError):
        cmp.pool(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        cmp.pool(np.ones((3, 2)), "median")


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 2**31 - 1), st.sampled_from(["mean", "max_query"]))
def test_pool_unit_norm(q, d, seed, mode):
    f = np.random.default_rng(seed).normal(size=(q, d))
    u = cmp.pool(f, mode)
    assert abs(np.linalg.norm(u) - 1.0) < 1e-6


def test_pool_backward_matches_finite_difference():
    rng = np.random.default_rng(4)
    f, w = rng.normal(size=(3, 5)), rng.normal(size=5)
    for mode in ("mean", "max_query"):
        _, state = cmp.pool_forward(f, mode)
        analytic = cmp.pool_backward(state, w)
        numeric = np.zeros_like(f)
        for idx in np.ndindex(f.shape):
            fp, fm = f.copy(), f.copy()
            fp[idx] += 1e-6
            fm[idx] -= 1e-6
            numeric[idx] = (cmp.pool(fp, mode) @ w - cmp.pool(fm, mode) @ w) / 2e-6
        assert np.allclose(analytic, numeric, atol=1e-6), mode


# -- checkpoints ---------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path, params, image):
    snapped = params.snapped()
    path = tmp_path / "c.ickp"
    cmp.save_checkpoint(snapped, path)
    back = cmp.load_checkpoint(path)
    assert back.config == snapped.config and back.equals(snapped)
    assert np.array_equal(cmp.compose(back, image, (1, 7)), cmp.compose(snapped, image, (1, 7)))
    cmp.save_checkpoint(back, tmp_path / "d.ickp")
    assert path.read_bytes() == (tmp_path / "d.ickp").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.ickp"
    bad.write_bytes(b"NOPE" + b"\0" * 16)
    with pytest.raises(ValueError):
        cmp.load_checkpoint(bad)


def test_param_shape_validation():
    arrays = {n: np.zeros(s) for n, s in CFG.shapes().items()}
    arrays["w1"] = np.zeros((2, 2))
    with pytest.raises(ValueError):
        cmp.ComposerParams(CFG, arrays)
