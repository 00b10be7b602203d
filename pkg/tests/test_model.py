import math

import numpy as np
import pytest

from conftest import normwise_rel
from parznet.model import (
    CheckpointError,
    ModelConfig,
    ModelConfigError,
    StaleCacheError,
    build,
    load_checkpoint,
    params_digest,
    parameter_shapes,
    save_checkpoint,
    shift_stability,
)
from parznet.variational import LOG_ALPHA_MIN, PriorKind, ScaleMixturePrior

TINY = dict(input_len=120, parzen_count=4, parzen_taps=41, conv_channels=(3, 3), mlp_hidden=(8, 8, 8),
            class_count=3, dtype="float64", fc_init_scale=1.0)


def tiny(seed=0, **kw):
    return build(ModelConfig(**{**TINY, **kw}), seed)


def frames(rng, n=4, length=120):
    return rng.uniform(-1, 1, size=(n, length))


def test_double_build_identical():
    a, b = tiny(5), tiny(5)
    assert params_digest(a) == params_digest(b)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].mu, b.params[k].mu)


def test_initial_std():
    m = tiny()
    p = m.params["fc1.w"]
    np.testing.assert_allclose(p.std, math.exp(-1.5) * np.abs(p.mu), rtol=1e-12)
    assert p.std.max() / np.abs(p.mu).max() == pytest.approx(0.22, abs=0.005)


def test_desk_parameter_count():
    cfg = ModelConfig(conv_channels=(16, 16, 32, 32, 64, 64, 64, 64), mlp_hidden=(256, 256, 256))
    # length: 3200 - 400 = 2800 -> pool 933 -> four valid pairs (-4, -4, /3 each)
    n = 933
    for _ in range(4):
        n = (n - 8) // 3
    assert n == 7
    chans = [40, 16, 16, 32, 32, 64, 64, 64, 64]
    conv = sum(chans[i + 1] * chans[i] * 5 + chans[i + 1] for i in range(8))
    dims = [n * 64, 256, 256, 256, 8]
    fc = sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(4))
    expected = 4 * 40 + conv + fc
    assert expected == 332936
    assert build(cfg, 0).param_count() == expected
    assert sum(math.prod(s) for s in parameter_shapes(cfg).values()) == expected


def test_config_validation():
    with pytest.raises(ModelConfigError):
        ModelConfig(conv_channels=(3, 3, 3)).validate()
    with pytest.raises(ModelConfigError):
        ModelConfig(mlp_hidden=(8, 8)).validate()
    with pytest.raises(ModelConfigError):
        ModelConfig(**{**TINY, "input_len": 60}).validate()


def test_mean_forward_deterministic_and_shape(rng):
    m, x = tiny(), frames(rng)
    a = m.forward(x)
    b = m.forward(x)
    assert a.shape == (4, 3)
    np.testing.assert_array_equal(a, b)


def test_sampled_near_mean_at_alpha_floor(rng):
    m, x = tiny(), frames(rng)
    mean = m.forward(x)
    for p in m.params.values():
        p.log_alpha[...] = LOG_ALPHA_MIN
    near = m.forward(x, "sampled", seed=1)
    for p in m.params.values():
        p.log_alpha[...] = -3.0
    far = m.forward(x, "sampled", seed=1)
    # first order in the noise: deviation scales like sqrt(alpha), here 0.01 vs 0.22
    ratio = normwise_rel(near, mean) / normwise_rel(far, mean)
    assert ratio < 3 * 0.01 / math.exp(-1.5)
    assert normwise_rel(near, mean) < 0.1


def test_sampled_seeded(rng):
    m, x = tiny(), frames(rng)
    np.testing.assert_array_equal(m.forward(x, "sampled", 3), m.forward(x, "sampled", 3))
    assert not np.array_equal(m.forward(x, "sampled", 3), m.forward(x, "sampled", 4))


def test_zero_upstream_gives_zero_grads(rng):
    m = tiny()
    out = m.forward(frames(rng), "sampled", seed=0)
    for d_mu, d_la in m.backward(np.zeros_like(out)).values():
        assert not d_mu.any() and not d_la.any()


def test_mean_mode_log_alpha_grad_zero(rng):
    m = tiny()
    out = m.forward(frames(rng))
    grads = m.backward(rng.normal(size=out.shape))
    assert all(not d_la.any() for _, d_la in grads.values())
    assert any(d_mu.any() for d_mu, _ in grads.values())


def test_backward_requires_forward(rng):
    m = tiny()
    with pytest.raises(StaleCacheError):
        m.backward(np.zeros((1, 3)))
    out = m.forward(frames(rng))
    m.backward(np.zeros_like(out))
    with pytest.raises(StaleCacheError):
        m.backward(np.zeros_like(out))


def test_end_to_end_fd(rng):
    from parznet.gradcheck import model_checks

    checks = model_checks(seed=2)
    assert checks and all(c.ok for c in checks), [(c.name, c.max_rel_err) for c in checks]
    assert max(c.max_rel_err for c in checks) <= 1e-4


def test_shift_stability_zero_shift(rng):
    m, x = tiny(), frames(rng, n=6)
    rows = shift_stability(m, x, 2)
    assert [r["shift"] for r in rows] == [-2, -1, 0, 1, 2]
    zero = rows[2]
    assert zero["mean_rel_change"] == 0.0 and zero["argmax_stable"] == 1.0


def test_shift_stability_shift_invariant_input():
    m = tiny()
    x = np.full((3, 120), 0.3)
    rows = shift_stability(m, x, 3)
    for r in rows:
        assert r["max_rel_change"] == 0.0 and r["argmax_stable"] == 1.0


@pytest.mark.parametrize("kind", list(PriorKind))
def test_checkpoint_round_trip(tmp_path, rng, kind):
    m = build(ModelConfig(**TINY), 3, kind, ScaleMixturePrior(0.3, 0.0, 0.01, 2.0))
    m.params["conv1.w"].log_alpha[0] = -1.25
    save_checkpoint(m, tmp_path / "m.pznm", {"note": "x"})
    back, extra = load_checkpoint(tmp_path / "m.pznm")
    assert extra == {"note": "x"}
    assert params_digest(back) == params_digest(m)
    assert back.prior.kind is kind and back.prior.mixture == m.prior.mixture
    np.testing.assert_array_equal(back.prior.means["parzen.eta"], m.prior.means["parzen.eta"])
    x = frames(rng)
    np.testing.assert_array_equal(back.forward(x), m.forward(x))


def test_checkpoint_corruption(tmp_path):
    m = tiny()
    p = tmp_path / "m.pznm"
    save_checkpoint(m, p)
    raw = p.read_bytes()
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    p.write_bytes(raw[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
