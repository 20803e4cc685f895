import numpy as np
import pytest

from trajvae import neuralkit as nk


def naive_forward(p, x):
    """Dense reference written with explicit loops over units."""
    h = list(map(float, x))
    last = len(p.weights) - 1
    for i, (w, b, tag) in enumerate(zip(p.weights, p.biases, p.activations)):
        out = []
        for r in range(w.shape[0]):
            a = b[r] + sum(w[r, c] * h[c] for c in range(w.shape[1]))
            if i == last and p.softplus_from is not None and r >= p.softplus_from:
                out.append(np.log1p(np.exp(a)) + 1e-4)
            elif tag == "tanh":
                out.append(np.tanh(a))
            elif tag == "softplus":
                out.append(np.log1p(np.exp(a)) + 1e-4)
            else:
                out.append(a)
        h = out
    return np.array(h)


def _net(rng, sizes=(5, 7, 4), softplus_from=2):
    p = nk.init_mlp(sizes, ["tanh"] * (len(sizes) - 2) + ["identity"], rng, softplus_from)
    return p.with_named({k: v + rng.normal(scale=0.1, size=v.shape) for k, v in p.named().items()})


def _fd_check(p, x, u, h=1e-5):
    """Max relative error of analytic vs central-difference gradient of <u, f(x)>."""
    _, cache = nk.mlp_forward(p, x)
    g, gin = nk.mlp_backward(p, cache, u)
    analytic = g.named()
    base = p.named()
    errs = []
    for name, arr in base.items():
        for i in range(arr.size):
            def f(d):
                q = {k: v.copy() for k, v in base.items()}
                q[name].flat[i] += d
                return float(np.sum(u * nk.mlp_forward(p.with_named(q), x)[0]))
            fd = (f(h) - f(-h)) / (2 * h)
            an = analytic[name].flat[i]
            errs.append(abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        fd = (np.sum(u * nk.mlp_forward(p, xp)[0]) - np.sum(u * nk.mlp_forward(p, xm)[0])) / (2 * h)
        errs.append(abs(fd - gin.flat[i]) / max(abs(fd), abs(gin.flat[i]), 1e-6))
    return max(errs), len(errs)


def test_zero_network():
    p = nk.zeros_mlp([3, 4, 2], ["tanh", "identity"])
    np.testing.assert_array_equal(nk.mlp_forward(p, np.ones(3))[0], 0.0)
    q = nk.zeros_mlp([3, 4, 2], ["tanh", "identity"], softplus_from=1)
    out = nk.mlp_forward(q, np.ones(3))[0]
    assert out[0] == 0 and out[1] == pytest.approx(np.log(2) + 1e-4)


def test_identity_layer():
    p = nk.MlpParams([np.eye(4)], [np.zeros(4)], ["identity"])
    x = np.arange(4.0)
    np.testing.assert_array_equal(nk.mlp_forward(p, x)[0], x)


@pytest.mark.parametrize("seed", range(5))
def test_forward_matches_naive(seed):
    rng = np.random.default_rng(seed)
    p = _net(rng, (6, 8, 5, 4))
    x = rng.normal(size=6)
    np.testing.assert_allclose(nk.mlp_forward(p, x)[0], naive_forward(p, x), rtol=1e-12, atol=1e-14)


def test_batched_equals_rows():
    rng = np.random.default_rng(1)
    p = _net(rng)
    xs = rng.normal(size=(9, 5))
    out, _ = nk.mlp_forward(p, xs)
    for x, o in zip(xs, out):
        np.testing.assert_allclose(nk.mlp_forward(p, x)[0], o, rtol=1e-13)


def test_forward_deterministic():
    rng = np.random.default_rng(2)
    p = _net(rng)
    x = rng.normal(size=5)
    a, _ = nk.mlp_forward(p, x)
    b, _ = nk.mlp_forward(p, x)
    assert a.tobytes() == b.tobytes()


def test_shape_errors():
    p = _net(np.random.default_rng(0))
    with pytest.raises(nk.ShapeError):
        nk.mlp_forward(p, np.ones(4))
    _, cache = nk.mlp_forward(p, np.ones(5))
    with pytest.raises(nk.ShapeError):
        nk.mlp_backward(p, cache, np.ones(3))


def test_linear_backward_outer_product():
    rng = np.random.default_rng(3)
    p = nk.MlpParams([rng.normal(size=(3, 4))], [rng.normal(size=3)], ["identity"])
    x = rng.normal(size=4)
    _, cache = nk.mlp_forward(p, x)
    for j in range(3):
        e = np.zeros(3)
        e[j] = 1
        g, _ = nk.mlp_backward(p, cache, e)
        np.testing.assert_array_equal(g.weights[0], np.outer(e, x))
        np.testing.assert_array_equal(g.biases[0], e)


def test_zero_output_grad():
    rng = np.random.default_rng(4)
    p = _net(rng)
    _, cache = nk.mlp_forward(p, rng.normal(size=5))
    g, gin = nk.mlp_backward(p, cache, np.zeros(4))
    assert all(np.all(v == 0) for v in g.named().values()) and np.all(gin == 0)


def test_finite_difference_oracle_1000_coordinates():
    rng = np.random.default_rng(5)
    total, worst = 0, 0.0
    while total < 1000:
        sizes = [int(rng.integers(2, 9)) for _ in range(int(rng.integers(2, 5)))]
        acts = ["tanh"] * (len(sizes) - 2) + ["identity"]
        sp = int(rng.integers(0, sizes[-1])) if rng.random() < 0.5 else None
        p = nk.init_mlp(sizes, acts, rng, sp)
        p = p.with_named({k: v + rng.normal(scale=0.2, size=v.shape) for k, v in p.named().items()})
        err, n = _fd_check(p, rng.normal(size=sizes[0]), rng.normal(size=sizes[-1]))
        worst, total = max(worst, err), total + n
    assert worst < 1e-4


def test_backward_linear_in_output_grad():
    rng = np.random.default_rng(6)
    for _ in range(1000):
        p = _net(rng, (4, 6, 3), softplus_from=1)
        xs = rng.normal(size=(3, 4))
        _, cache = nk.mlp_forward(p, xs)
        u, v = rng.normal(size=(2, 3, 3))
        a, b = rng.normal(size=2)
        g_mix, in_mix = nk.mlp_backward(p, cache, a * u + b * v)
        gu, in_u = nk.mlp_backward(p, cache, u)
        gv, in_v = nk.mlp_backward(p, cache, v)
        for name, arr in g_mix.named().items():
            ref = a * gu.named()[name] + b * gv.named()[name]
            np.testing.assert_allclose(arr, ref, rtol=1e-12, atol=1e-12 * np.abs(ref).max())
        np.testing.assert_allclose(in_mix, a * in_u + b * in_v, rtol=1e-12, atol=1e-13)


# ---------------------------------------------------------------- optimizer


def test_adam_zero_gradient():
    params = {"w": np.array([1.0, -2.0])}
    new, st = nk.adam_update(nk.OptimizerState(), params, {"w": np.zeros(2)})
    np.testing.assert_array_equal(new["w"], params["w"])
    assert st.step == 1


def test_adam_first_step_closed_form():
    g = np.array([0.5, -3.0, 1e-3])
    st = nk.OptimizerState(lr=0.01)
    new, _ = nk.adam_update(st, {"w": np.zeros(3)}, {"w": g})
    np.testing.assert_allclose(new["w"], -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_scalar_convergence():
    w, st = {"w": np.array(0.0)}, nk.OptimizerState(lr=0.1)
    dist = []
    for _ in range(100):
        w, st = nk.adam_update(st, w, {"w": 2 * (w["w"] - 3)})
        dist.append(abs(float(w["w"]) - 3))
    assert dist[-1] < 0.5 and dist[-1] < dist[0]


def test_sgd_flag():
    new, _ = nk.adam_update(nk.OptimizerState(lr=0.5, kind="sgd"), {"w": np.ones(2)}, {"w": np.ones(2)})
    np.testing.assert_array_equal(new["w"], 0.5)


def test_adam_rejects_nonfinite_and_mismatch():
    with pytest.raises(nk.ExplodedError, match="exploded"):
        nk.adam_update(nk.OptimizerState(), {"w": np.ones(2)}, {"w": np.array([1.0, np.nan])})
    with pytest.raises(nk.ShapeError):
        nk.adam_update(nk.OptimizerState(), {"w": np.ones(2)}, {"v": np.ones(2)})


def test_adam_on_mlp_params_keeps_type():
    rng = np.random.default_rng(7)
    p = _net(rng)
    new, _ = nk.adam_update(nk.OptimizerState(), p, nk.zeros_like(p))
    assert isinstance(new, nk.MlpParams)


# ---------------------------------------------------------------- file format


def test_param_file_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    p = _net(rng, (5, 9, 6), softplus_from=3)
    f = tmp_path / "p.bin"
    nk.save_mlp(f, p)
    q = nk.load_mlp(f)
    for (k, a), (k2, b) in zip(p.named().items(), q.named().items()):
        assert k == k2 and a.tobytes() == b.tobytes()
    assert q.softplus_from == 3 and q.activations == p.activations
    f2 = tmp_path / "q.bin"
    nk.save_mlp(f2, q)
    assert f.read_bytes() == f2.read_bytes()


def test_param_file_errors(tmp_path):
    f = tmp_path / "bad.bin"
    f.write_bytes(b"garbage\n")
    with pytest.raises(nk.FormatError, match="version"):
        nk.read_params(f)
    f.write_bytes(b"TRAJVAE-PARAMS 99\n{}\n")
    with pytest.raises(nk.FormatError, match="unsupported manifest version 99"):
        nk.read_params(f)
    good = tmp_path / "good.bin"
    nk.save_mlp(good, _net(np.random.default_rng(0)))
    f.write_bytes(good.read_bytes()[:-8])
    with pytest.raises(nk.FormatError, match="version"):
        nk.read_params(f)
