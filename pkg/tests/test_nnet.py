import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from collaq.checks import GRADCHECK_EPS, random_gradcheck_case
from collaq.mdp import ConfigError
from collaq.nnet import (
    DimensionError, NetworkSpec, ParamStore, attention_forward, backward,
    finite_diff_gradcheck, init_params, mlp_forward,
)


def spec64(**kw):
    base = dict(o_alone_dim=6, token_dim=4, alone_hidden=(5,), model_dim=8, num_layers=2,
                num_heads=2, head_hidden=(7,), precision="float64")
    base.update(kw)
    return NetworkSpec(**base)


def randomize(p, rng, scale=0.3):
    for k in p:
        p[k] = p[k] + rng.normal(0, scale, p[k].shape)
    return p


def ref_attention(params, query, tokens, H, L):
    """Loop-based recomputation of the stacked attention block, one head at a time."""
    d = query.shape[0]
    dh = d // H
    if len(tokens) == 0:
        return np.zeros(d)
    h = query.copy()
    for l in range(L):
        Wq, Wk, Wv, Wo, bo = (params[f"attn{l}/{n}"] for n in ("Wq", "Wk", "Wv", "Wo", "bo"))
        q = h @ Wq
        ctx = np.zeros(d)
        for head in range(H):
            sl = slice(head * dh, (head + 1) * dh)
            scores = [float(q[sl] @ (t @ Wk)[sl]) / math.sqrt(dh) for t in tokens]
            m = max(scores)
            w = [math.exp(s - m) for s in scores]
            z = sum(w)
            for wi, t in zip(w, tokens):
                ctx[sl] += wi / z * (t @ Wv)[sl]
        h = np.maximum(ctx @ Wo + bo + h, 0)
    return h


def test_same_seed_same_params():
    a = init_params(spec64(), np.random.default_rng(0))
    b = init_params(spec64(), np.random.default_rng(0))
    assert a.equal(b)


def test_biases_zero_and_weights_bounded():
    spec = spec64()
    p = init_params(spec, np.random.default_rng(0))
    for k, v in p.items():
        if "/b" in k:
            assert np.all(v == 0)
        else:
            fan_in, fan_out = v.shape[-2:]
            assert np.all(np.abs(v) <= math.sqrt(6 / (fan_in + fan_out)))


def test_weight_mean_near_zero():
    spec = NetworkSpec(o_alone_dim=300, token_dim=300, alone_hidden=(300,), model_dim=32,
                       head_hidden=(300,), precision="float64")
    p = init_params(spec, np.random.default_rng(0))
    w = p["alone/W0"].ravel()
    bound = math.sqrt(6 / 600)
    sigma = bound / math.sqrt(3) / math.sqrt(w.size)
    assert w.size >= 10**4 and abs(w.mean()) <= 3 * sigma


def test_spec_validation():
    with pytest.raises(ConfigError):
        spec64(model_dim=7, num_heads=2).validate()
    with pytest.raises(ConfigError):
        spec64(alone_hidden=(0,)).validate()


def test_zero_net_outputs_zero():
    p = init_params(spec64(), np.random.default_rng(0)).zeros_like()
    y, _ = mlp_forward(p, "alone", np.ones(6))
    assert np.all(y == 0)


def test_identity_layer():
    p = ParamStore({"id/W0": np.eye(3), "id/b0": np.zeros(3)})
    x = np.array([1.0, -2.0, 3.0])
    y, _ = mlp_forward(p, "id", x)
    assert np.array_equal(y, x)


def test_mlp_matches_matrix_recomputation(rng):
    p = randomize(init_params(spec64(), rng), rng)
    x = rng.normal(size=6)
    h = np.maximum(x @ p["alone/W0"] + p["alone/b0"], 0)
    ref = h @ p["alone/W1"] + p["alone/b1"]
    y, _ = mlp_forward(p, "alone", x)
    assert np.allclose(y, ref, atol=1e-14)


def test_mlp_dim_mismatch(rng):
    p = init_params(spec64(), rng)
    with pytest.raises(ValueError):
        mlp_forward(p, "alone", np.ones(5))


def test_empty_tokens_give_exact_zero(rng):
    p = randomize(init_params(spec64(), rng), rng)
    y, _ = attention_forward(p, rng.normal(size=8), np.zeros((0, 8)))
    assert np.array_equal(y, np.zeros(8))


def test_masked_out_tokens_give_exact_zero(rng):
    p = randomize(init_params(spec64(), rng), rng)
    y, _ = attention_forward(p, rng.normal(size=(3, 8)), rng.normal(size=(3, 2, 8)),
                             mask=np.zeros((3, 2), dtype=bool))
    assert np.array_equal(y, np.zeros((3, 8)))


def test_singleton_softmax_weight_is_one(rng):
    p = randomize(init_params(spec64(num_layers=1), rng), rng)
    _, tr = attention_forward(p, rng.normal(size=8), rng.normal(size=(1, 8)), want_trace=True)
    probs = tr.records[0][4]
    assert np.array_equal(probs, np.ones_like(probs))


def test_attention_matches_step_by_step(rng):
    p = randomize(init_params(spec64(num_layers=2), rng), rng)
    q = rng.normal(size=8)
    toks = rng.normal(size=(3, 8))
    y, _ = attention_forward(p, q, toks, num_heads=2)
    assert np.allclose(y, ref_attention(p, q, toks, 2, 2), atol=1e-12)


def test_attention_dim_mismatch(rng):
    p = init_params(spec64(), rng)
    with pytest.raises(DimensionError):
        attention_forward(p, np.ones(8), np.ones((2, 5)))


def test_token_permutation_invariance(rng):
    p = randomize(init_params(spec64(num_layers=1), rng), rng)
    q = rng.normal(size=8)
    toks = rng.normal(size=(4, 8))
    y1, _ = attention_forward(p, q, toks)
    y2, _ = attention_forward(p, q, toks[[2, 0, 3, 1]])
    assert np.allclose(y1, y2, atol=1e-12)


def test_forward_is_deterministic(rng):
    p = randomize(init_params(spec64(), rng), rng)
    q, toks = rng.normal(size=8), rng.normal(size=(3, 8))
    assert np.array_equal(attention_forward(p, q, toks)[0], attention_forward(p, q, toks)[0])


def test_zero_upstream_zero_grads(rng):
    p = randomize(init_params(spec64(), rng), rng)
    y, tr = mlp_forward(p, "alone", rng.normal(size=(4, 6)), want_trace=True)
    g = backward(p, tr, np.zeros_like(y))
    assert all(np.all(v == 0) for v in g.tensors.values())


def test_linear_layer_closed_form(rng):
    p = ParamStore({"lin/W0": rng.normal(size=(3, 2)), "lin/b0": np.zeros(2)})
    x = rng.normal(size=3)
    up = rng.normal(size=2)
    _, tr = mlp_forward(p, "lin", x, want_trace=True)
    g = backward(p, tr, up)
    assert np.allclose(g["lin/W0"], np.outer(x, up), atol=1e-15)


def test_untouched_tensors_get_zero_gradients(rng):
    p = randomize(init_params(spec64(), rng), rng)
    _, tr = mlp_forward(p, "alone", rng.normal(size=6), want_trace=True)
    g = backward(p, tr, np.ones(5))
    assert np.all(g["attn0/Wq"] == 0) and g.names() == p.names()


def test_linear_quadratic_gradcheck(rng):
    p = ParamStore({"lin/W0": rng.normal(size=(4, 3)), "lin/b0": rng.normal(size=3)})
    x = rng.normal(size=(5, 4))

    def loss(q):
        return float(0.5 * np.sum(mlp_forward(q, "lin", x)[0] ** 2))

    def grad(q):
        y, tr = mlp_forward(q, "lin", x, want_trace=True)
        return backward(q, tr, y)

    assert finite_diff_gradcheck(p, loss, grad, eps=1e-5) <= 1e-9


@pytest.mark.parametrize("layers", [1, 2])
def test_attention_backward_matches_finite_differences(layers, rng):
    p = randomize(init_params(spec64(num_layers=layers), rng), rng, 0.5)
    q = rng.normal(size=(4, 8))
    toks = rng.normal(size=(4, 3, 8))
    mask = rng.random((4, 3)) < 0.7
    up = rng.normal(size=(4, 8))

    def loss(r):
        return float(np.sum(up * attention_forward(r, q, toks, mask)[0]))

    def grad(r):
        _, tr = attention_forward(r, q, toks, mask, want_trace=True)
        return backward(r, tr, up)

    assert min(finite_diff_gradcheck(p, loss, grad, eps=e) for e in GRADCHECK_EPS) <= 1e-6


def test_gradcheck_rejects_nonfinite(rng):
    p = ParamStore({"lin/W0": np.ones((1, 1)), "lin/b0": np.zeros(1)})
    with pytest.raises(FloatingPointError):
        finite_diff_gradcheck(p, lambda q: float("nan"), lambda q: q.zeros_like())


def test_eps_sweep_is_u_shaped():
    params, lf, gf = random_gradcheck_case(np.random.default_rng([0, 3]))
    errs = [finite_diff_gradcheck(params, lf, gf, eps=e) for e in (1e-2, 1e-5, 1e-9)]
    assert errs[1] < errs[0] and errs[1] < errs[2]
    assert errs[1] <= 1e-6


def test_param_store_helpers(rng):
    p = init_params(spec64(), rng, num_agents=3)
    assert p["alone/W0"].shape == (3, 6, 5)
    a1 = p.agent(1)
    assert np.array_equal(a1["alone/W0"], p["alone/W0"][1])
    back = ParamStore.stack([p.agent(i) for i in range(3)])
    assert back.equal(p)
    flat = p.flat()
    q = p.zeros_like()
    q.load_flat(flat)
    assert q.equal(p) and q.digest() == p.digest()
    assert p.total_count == flat.size


@given(st.integers(0, 1000))
def test_stacked_agents_match_single_agent_runs(seed):
    rng = np.random.default_rng(seed)
    p = randomize(init_params(spec64(), rng, num_agents=2), rng)
    q = rng.normal(size=(2, 3, 8))
    toks = rng.normal(size=(2, 3, 2, 8))
    y, _ = attention_forward(p, q, toks)
    for i in range(2):
        yi, _ = attention_forward(p.agent(i), q[i], toks[i])
        assert np.allclose(y[i], yi, atol=1e-12)
