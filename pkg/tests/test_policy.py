import numpy as np
import pytest

from mamrl_net import policy as nn
from mamrl_net.simulator import ContractError, observation_width


def _small(rng, n_in=7, hidden=(5, 4), n_out=4, bias=False):
    p = nn.init_params(n_out, rng, sizes=[n_in, *hidden, n_out])
    if bias:
        # random biases keep ReLU pre-activations away from the kink at 0
        p = nn.PolicyParams((w, rng.normal(0, 0.5, b.shape)) for w, b in p.layers)
    return p


def _reference_forward(params, x, mask):
    # loop-based, no vectorization
    h = list(x)
    for k, (w, b) in enumerate(params.layers):
        out = []
        for j in range(w.shape[1]):
            s = b[j]
            for i in range(w.shape[0]):
                s += h[i] * w[i, j]
            out.append(max(s, 0.0) if k < len(params.layers) - 1 else s)
        h = out
    valid = [j for j in range(len(h)) if mask[j]]
    top = max(h[j] for j in valid)
    e = [np.exp(h[j] - top) if mask[j] else 0.0 for j in range(len(h))]
    tot = sum(e)
    return np.array([v / tot for v in e])


def test_forward_matches_reference():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = _small(rng)
        x = rng.normal(size=7)
        mask = rng.random(4) < 0.7
        mask[rng.integers(4)] = True
        np.testing.assert_allclose(nn.forward(p, x, mask), _reference_forward(p, x, mask), atol=1e-10)


def test_forward_hot_matches_dense():
    rng = np.random.default_rng(1)
    n = 12
    p = nn.init_params(n, rng)
    hot = sorted(rng.choice(observation_width(n), 12, replace=False))
    x = np.zeros(observation_width(n))
    x[hot] = 1
    mask = np.zeros(n, dtype=bool)
    mask[[1, 2, 3]] = True
    np.testing.assert_allclose(nn.forward_hot(p, hot, mask), nn.forward(p, x, mask), atol=1e-12)


def test_masked_entries_are_exact_zero_and_sum_to_one():
    rng = np.random.default_rng(2)
    p = _small(rng)
    mask = np.array([True, False, True, False])
    probs = nn.forward(p, rng.normal(size=7), mask)
    assert probs[1] == 0.0 and probs[3] == 0.0
    assert probs.sum() == pytest.approx(1.0, abs=1e-12)


def test_zero_weights_give_uniform_over_valid():
    rng = np.random.default_rng(3)
    p = _small(rng).zeros_like()
    probs = nn.forward(p, np.ones(7), np.array([True, True, False, True]))
    np.testing.assert_allclose(probs, [1 / 3, 1 / 3, 0, 1 / 3])


def test_empty_mask_is_contract_error():
    p = _small(np.random.default_rng(4))
    with pytest.raises(ContractError):
        nn.forward(p, np.zeros(7), np.zeros(4, dtype=bool))


def test_width_mismatch_is_contract_error():
    p = _small(np.random.default_rng(4))
    with pytest.raises(ContractError):
        nn.forward(p, np.zeros(6), np.ones(4, dtype=bool))


def test_masked_action_gradient_is_contract_error():
    p = _small(np.random.default_rng(4))
    with pytest.raises(ContractError):
        nn.logprob_grad(p, np.zeros(7), np.array([True, False, True, True]), 1)


def test_finite_difference_checks():
    rng = np.random.default_rng(5)
    h = 1e-5
    checked = 0
    while checked < 100:
        p = _small(rng, bias=True)
        x = rng.normal(size=7)
        mask = np.ones(4, dtype=bool)
        mask[rng.integers(4)] = False
        a = int(rng.choice(np.flatnonzero(mask)))
        g = nn.logprob_grad(p, x, mask, a).flat()
        theta = p.flat()
        for idx in rng.choice(len(theta), 10, replace=False):
            up, dn = theta.copy(), theta.copy()
            up[idx] += h
            dn[idx] -= h
            num = (nn.log_prob(p.with_flat(up), x, mask, a) - nn.log_prob(p.with_flat(dn), x, mask, a)) / (2 * h)
            if abs(num) < 1e-6 and abs(g[idx]) < 1e-6:
                continue  # dead unit: both sides vanish
            rel = abs(num - g[idx]) / max(abs(num), abs(g[idx]))
            assert rel < 1e-4, (idx, num, g[idx])
            checked += 1
            if checked == 100:
                break


def test_batch_gradient_is_weighted_sum():
    rng = np.random.default_rng(6)
    p = _small(rng)
    xs = rng.normal(size=(5, 7))
    masks = np.ones((5, 4), dtype=bool)
    acts = rng.integers(0, 4, 5)
    w = rng.normal(size=5)
    total = sum(wi * nn.logprob_grad(p, x, m, a).flat() for x, m, a, wi in zip(xs, masks, acts, w))
    np.testing.assert_allclose(nn.batch_logprob_grad(p, xs, masks, acts, w).flat(), total, atol=1e-12)


def test_sampling_uniform_frequencies():
    rng = np.random.default_rng(7)
    probs = np.array([0.25, 0.25, 0.0, 0.25, 0.25])
    draws = 40_000
    counts = np.bincount([nn.sample_action(probs, rng) for _ in range(draws)], minlength=5)
    assert counts[2] == 0
    sigma = np.sqrt(draws * 0.25 * 0.75)
    for c in counts[[0, 1, 3, 4]]:
        assert abs(c - draws / 4) < 4 * sigma


def test_he_init_variance():
    rng = np.random.default_rng(8)
    p = nn.init_params(12, rng)
    assert p.sizes == [155, 128, 128, 128, 128, 128, 12]
    for w, b in p.layers:
        target = 2.0 / w.shape[0]
        assert abs(w.var() / target - 1) < 0.2
        assert not b.any()


def test_init_is_seeded():
    a = nn.init_params(4, np.random.default_rng(9), hidden=(8,))
    b = nn.init_params(4, np.random.default_rng(9), hidden=(8,))
    assert a == b


def test_apply_update_shape_mismatch():
    rng = np.random.default_rng(10)
    with pytest.raises(ValueError):
        nn.apply_update(_small(rng), _small(rng, hidden=(5, 3)), 0.1)


def test_zero_step_is_identity():
    p = _small(np.random.default_rng(11))
    assert nn.apply_update(p, p, 0.0) == p


def test_flat_round_trip():
    p = _small(np.random.default_rng(12))
    assert p.with_flat(p.flat()) == p


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(13)
    pols = [nn.init_params(5, rng, hidden=(6, 6)) for _ in range(3)]
    path = tmp_path / "ck.npz"
    nn.save_checkpoint(path, pols, {"alpha": 0.01})
    back, meta = nn.load_checkpoint(path)
    assert meta == {"alpha": 0.01}
    assert back == pols
    for a, b in zip(back, pols):
        assert a.flat().tobytes() == b.flat().tobytes()


def test_bad_checkpoint(tmp_path):
    path = tmp_path / "junk.npz"
    path.write_bytes(b"not a zip")
    with pytest.raises(ValueError):
        nn.load_checkpoint(path)
