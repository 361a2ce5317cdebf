import itertools
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jscn.errors import NumericalError
from jscn.gradcheck import check_gradients, random_instance
from jscn.graph import BipartiteDomain, domain_spectrum
from jscn.model import EmbeddingSet, ModelHyperparams, forward, init_parameters
from jscn.training import (
    RMSprop,
    SharedUserIndex,
    TrainConfig,
    TripleBatch,
    combine_losses,
    compute_gradients,
    cross_domain_loss,
    domain_seeds,
    in_domain_loss,
    loss_and_gradients,
    regularization,
    rmsprop_step,
    sample_triples,
    scatter_add,
    total_loss,
    train,
)


def _emb(v_user, v_item=None, u_inv=None):
    v_user = np.asarray(v_user, dtype=float)
    v_item = np.zeros((1, v_user.shape[1])) if v_item is None else np.asarray(v_item, dtype=float)
    u_inv = v_user if u_inv is None else np.asarray(u_inv, dtype=float)
    return EmbeddingSet(v_user, v_item, u_inv)


# ---------------------------------------------------------------- sampling


def test_sampling_forced_triple():
    batch = sample_triples(np.array([[0, 0]]), 2, 16, np.random.default_rng(0))
    assert batch.triples.shape == (16, 3)
    assert np.all(batch.triples == [0, 0, 1])


def test_sampling_reproducible():
    edges = np.array([[0, 0], [0, 3], [1, 1], [2, 2], [2, 0]])
    a = sample_triples(edges, 5, 50, np.random.default_rng(3))
    b = sample_triples(edges, 5, 50, np.random.default_rng(3))
    np.testing.assert_array_equal(a.triples, b.triples)


def test_sampling_rejects_user_without_negatives():
    with pytest.raises(ValueError, match="no negative items for user 0"):
        sample_triples(np.array([[0, 0], [0, 1], [1, 0]]), 2, 4, np.random.default_rng(0))


def test_sampling_frequencies_match_enumeration():
    edges = np.array([[0, 0], [1, 1], [1, 2]])
    n_items = 3
    observed = {(int(u), int(i)) for u, i in edges}
    # exhaustive enumeration: uniform edge, then uniform unobserved item
    expected = Counter()
    for u, i in observed:
        negs = [j for j in range(n_items) if (u, j) not in observed]
        for j in negs:
            expected[(u, i, j)] += 1 / len(observed) / len(negs)
    n = 100_000
    batch = sample_triples(edges, n_items, n, np.random.default_rng(2024))
    got = Counter(map(tuple, batch.triples.tolist()))
    assert set(got) == set(expected)
    for t, p in expected.items():
        sigma = math.sqrt(n * p * (1 - p))
        assert abs(got[t] - n * p) <= 3 * sigma, (t, got[t], n * p)


def test_sampling_never_returns_observed_negative(rng):
    r = rng.random((20, 15)) < 0.4
    r[:, 0] = True
    r[:, 1] = False
    edges = np.argwhere(r)
    batch = sample_triples(edges, 15, 2000, rng)
    assert not r[batch.triples[:, 0], batch.triples[:, 2]].any()
    assert r[batch.triples[:, 0], batch.triples[:, 1]].all()


# ------------------------------------------------------------------ losses


def test_bpr_equal_items_is_ln2():
    emb = _emb([[0.3, 0.7]], [[1.0, 2.0], [1.0, 2.0]])
    batch = TripleBatch(np.array([[0, 0, 1]] * 4))
    assert in_domain_loss(emb, batch) == pytest.approx(4 * math.log(2), abs=1e-12)


def test_bpr_hand_example():
    emb = _emb([[1.0, 0.0]], [[2.0, 0.0], [1.0, 0.0]])
    loss = in_domain_loss(emb, TripleBatch(np.array([[0, 0, 1]])))
    assert round(loss, 6) == 0.313262


def test_bpr_monotone_in_gap():
    vals = []
    for g in [-50.0, -3.0, 0.0, 3.0, 50.0, 800.0]:
        emb = _emb([[1.0]], [[g], [0.0]])
        vals.append(in_domain_loss(emb, TripleBatch(np.array([[0, 0, 1]]))))
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-300 and math.isfinite(vals[0])


def test_cross_domain_examples():
    shared = SharedUserIndex({(0, 1): np.array([[0, 0]]), (1, 0): np.array([[0, 0]])})
    a = _emb([[0.0]], u_inv=[[1.0, 0.0]])
    b = _emb([[0.0]], u_inv=[[0.0, 1.0]])
    assert cross_domain_loss([a, b], shared) == 2.0
    assert cross_domain_loss([a, b], shared, squared=False) == pytest.approx(math.sqrt(2))
    assert cross_domain_loss([a, a], shared) == 0.0
    assert cross_domain_loss([a, b], SharedUserIndex()) == 0.0


def test_cross_domain_sums_unordered_pairs_once(rng):
    embs = [_emb(np.zeros((3, 1)), u_inv=rng.normal(size=(3, 2))) for _ in range(3)]
    rows = np.array([[0, 1], [2, 2]])
    pairs = {}
    for m, n in itertools.permutations(range(3), 2):
        pairs[(m, n)] = rows if m < n else rows[:, ::-1]
    expected = 0.0
    for m, n in itertools.combinations(range(3), 2):
        for a, b in rows:
            expected += float(np.sum((embs[m].u_invariant[a] - embs[n].u_invariant[b]) ** 2))
    assert cross_domain_loss(embs, SharedUserIndex(pairs)) == pytest.approx(expected, rel=1e-12)


def test_regularization_examples():
    e = _emb([[1.0, 2.0], [0.0, 1.0]])
    assert regularization([e], 0.5) == 3.0
    assert regularization([e], 0.0) == 0.0
    big = _emb([[2.0, 4.0], [0.0, 2.0]])
    assert regularization([big], 0.5) == 4 * regularization([e], 0.5)
    with_items = _emb([[1.0, 2.0], [0.0, 1.0]], [[1.0, 1.0]])
    assert regularization([with_items], 0.5, include_items=True) == 4.0


def test_combine_losses():
    assert combine_losses([1.0], 2.0, 3.0, 1.0) == 6.0
    assert combine_losses([1.0, 0.5], 2.0, 3.0, 1.0) == 6.5
    assert combine_losses([1.0, 0.5], 2.0, 3.0, 2.0) - combine_losses([1.0, 0.5], 2.0, 3.0, 1.0) == 2.0


def test_total_loss_single_domain_degenerate():
    emb = _emb([[1.0, 0.0]], [[2.0, 0.0], [1.0, 0.0]])
    batch = TripleBatch(np.array([[0, 0, 1], [0, 1, 0]]))
    cfg = TrainConfig(reg_epsilon=0.0, cross_weight=0.0)
    assert total_loss([emb], [batch], SharedUserIndex(), cfg) == in_domain_loss(emb, batch)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_cross_domain_nonnegative(seed):
    r = np.random.default_rng(seed)
    embs = [_emb(np.zeros((4, 1)), u_inv=r.normal(size=(4, 3))) for _ in range(2)]
    rows = np.array([[0, 3], [1, 1]])
    shared = SharedUserIndex({(0, 1): rows, (1, 0): rows[:, ::-1]})
    assert cross_domain_loss(embs, shared) >= 0.0


def test_scatter_add_matches_add_at(rng):
    idx = rng.integers(0, 7, size=50)
    vals = rng.normal(size=(50, 3))
    a, b = np.zeros((7, 3)), np.zeros((7, 3))
    scatter_add(a, idx, vals)
    np.add.at(b, idx, vals)
    np.testing.assert_allclose(a, b, atol=1e-14)


# --------------------------------------------------------------- gradients


@pytest.mark.parametrize("kind", ["linear", "mlp"])
@pytest.mark.parametrize("mode", ["all", "last"])
def test_gradients_match_finite_differences(kind, mode):
    domains, shared = random_instance(5)
    hp = ModelHyperparams(input_dim=3, filter_dim=3, num_layers=2, mapping_kind=kind, mlp_hidden=4, concat_mode=mode)
    cfg = TrainConfig(reg_epsilon=0.1, cross_weight=0.7, reg_items=True)
    spectra = [domain_spectrum(d) for d in domains]
    params = [init_parameters(hp, d.n_users, d.n_items, [1, k]) for k, d in enumerate(domains)]
    r = np.random.default_rng(9)
    batches = [sample_triples(d.edges, d.n_items, 6, r, k) for k, d in enumerate(domains)]
    grads = compute_gradients(params, spectra, batches, shared, hp, cfg)

    def f():
        return total_loss([forward(p, s, hp) for p, s in zip(params, spectra)], batches, shared, cfg)

    h = 1e-5
    for k, p in enumerate(params):
        for name, arr in p.tensors().items():
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + h
                fp = f()
                arr[idx] = old - h
                fm = f()
                arr[idx] = old
                fd = (fp - fm) / (2 * h)
                an = grads[k][name][idx]
                if abs(fd) > 1e-8:
                    assert abs(an - fd) <= 1e-4 * abs(fd), (k, name, idx, an, fd)
                else:
                    assert abs(an - fd) <= 1e-8, (k, name, idx, an, fd)


def test_gradcheck_helper_passes_and_detects_fault():
    assert check_gradients(seed=1, mapping_kind="linear").passed
    assert not check_gradients(seed=1, mapping_kind="linear", perturb=1e-3).passed


def test_unsquared_cross_gradient_is_zero_at_coincidence():
    domains, _ = random_instance(2)
    hp = ModelHyperparams(input_dim=2, filter_dim=2, num_layers=1)
    spectra = [domain_spectrum(d) for d in domains]
    params = [init_parameters(hp, d.n_users, d.n_items, 3) for d in domains]
    # identical inputs and a shared user at the same row ⇒ Δ = 0
    rows = np.array([[0, 0]])
    shared = SharedUserIndex({(0, 1): rows, (1, 0): rows})
    params[1] = params[0].copy()
    spectra[1] = spectra[0]
    cfg = TrainConfig(reg_epsilon=0.0, cross_weight=1.0, squared_cross=False)
    empty = [TripleBatch(np.zeros((0, 3), dtype=np.int64), k) for k in range(2)]
    loss, grads = loss_and_gradients(params, spectra, empty, shared, hp, cfg)
    assert loss.cross == 0.0
    for g in grads:
        for arr in g.values():
            assert np.all(arr == 0)


def test_mapping_gradient_zero_without_cross_term():
    domains, shared = random_instance(4)
    hp = ModelHyperparams(input_dim=3, filter_dim=3, num_layers=2)
    spectra = [domain_spectrum(d) for d in domains]
    params = [init_parameters(hp, d.n_users, d.n_items, k) for k, d in enumerate(domains)]
    r = np.random.default_rng(0)
    batches = [sample_triples(d.edges, d.n_items, 8, r, k) for k, d in enumerate(domains)]
    grads = compute_gradients(params, spectra, batches, shared, hp, TrainConfig(cross_weight=0.0, reg_epsilon=0.3))
    for g in grads:
        assert np.all(g["w_b"] == 0)
        assert np.any(g["x0"] != 0)


def test_x0_gradient_vanishes_at_surrogate_minimum():
    # theta = 0 makes every layer constant, so with no triples and no cross
    # term the loss is eps * ||x0_users||^2 + const, minimised at x0_users = 0.
    d = BipartiteDomain(["a", "b"], ["x", "y", "z"], [(0, 0), (1, 1), (1, 2)])
    hp = ModelHyperparams(input_dim=3, filter_dim=3, num_layers=2)
    params = init_parameters(hp, 2, 3, 0)
    for t in params.theta:
        t[:] = 0
    params.x0[:2] = 0
    cfg = TrainConfig(reg_epsilon=0.25, cross_weight=0.0)
    empty = [TripleBatch(np.zeros((0, 3), dtype=np.int64))]
    _, grads = loss_and_gradients([params], [domain_spectrum(d)], empty, SharedUserIndex(), hp, cfg)
    assert np.linalg.norm(grads[0]["x0"]) < 1e-8
    # away from the minimum the gradient is 2 eps x0 on user rows
    params.x0[0, 1] = 1.0
    _, grads = loss_and_gradients([params], [domain_spectrum(d)], empty, SharedUserIndex(), hp, cfg)
    assert grads[0]["x0"][0, 1] == pytest.approx(0.5)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_gradient_raises():
    domains, shared = random_instance(0)
    hp = ModelHyperparams(input_dim=2, filter_dim=2, num_layers=1)
    spectra = [domain_spectrum(d) for d in domains]
    params = [init_parameters(hp, d.n_users, d.n_items, k) for k, d in enumerate(domains)]
    params[1].mapping["w_b"][0, 0] = np.inf
    r = np.random.default_rng(0)
    batches = [sample_triples(d.edges, d.n_items, 4, r, k) for k, d in enumerate(domains)]
    with pytest.raises(NumericalError, match="domain"):
        loss_and_gradients(params, spectra, batches, shared, hp, TrainConfig())


# --------------------------------------------------------------- optimizer


def test_rmsprop_first_step():
    cfg = TrainConfig(learning_rate=0.001)
    new, state = rmsprop_step({"w": np.array([0.0])}, {"w": np.array([1.0])}, {}, cfg)
    assert new["w"][0] == pytest.approx(-0.001 / (math.sqrt(0.1) + 1e-8), rel=1e-12)
    assert round(new["w"][0], 7) == -0.0031623
    np.testing.assert_allclose(state["w"], [0.1])


def test_rmsprop_zero_gradient():
    w = np.array([1.5, -2.0])
    new, _ = rmsprop_step({"w": w}, {"w": np.zeros(2)}, {}, TrainConfig())
    np.testing.assert_array_equal(new["w"], w)


def test_rmsprop_steady_state_step_equals_lr():
    for scale in (1e-3, 1.0, 1e3):
        opt = RMSprop(lr=0.01)
        w = {"w": np.array([0.0])}
        for _ in range(400):
            before = w["w"].copy()
            opt.step(w, {"w": np.array([scale])})
        assert abs(before[0] - w["w"][0]) == pytest.approx(0.01, rel=1e-4)


def test_rmsprop_decreases_quadratic_bowl(rng):
    a = np.diag([1.0, 4.0, 9.0])
    w = rng.normal(size=3)
    opt = RMSprop(lr=0.01)
    params = {"w": w}
    f = lambda x: 0.5 * x @ a @ x
    for _ in range(20):
        before = f(params["w"])
        opt.step(params, {"w": a @ params["w"]})
        assert f(params["w"]) < before


# ------------------------------------------------------------------- train


def _toy(seed=0):
    domains, shared = random_instance(seed, n_users=8, n_items=7)
    return domains, shared, [domain_spectrum(d) for d in domains]


def test_train_reproducible():
    domains, shared, spectra = _toy()
    hp = ModelHyperparams(input_dim=3, filter_dim=3, num_layers=2)
    cfg = TrainConfig(epochs=15, batch_size=16, learning_rate=0.01, seed=4)
    a = train(domains, spectra, shared, hp, cfg)
    b = train(domains, spectra, shared, hp, cfg)
    assert a.history == b.history
    for pa, pb in zip(a.params, b.params):
        for name, t in pa.tensors().items():
            assert t.tobytes() == pb.tensors()[name].tobytes()


def test_train_history_fields():
    domains, shared, spectra = _toy()
    hp = ModelHyperparams(input_dim=2, filter_dim=2, num_layers=1)
    seen = []
    res = train(domains, spectra, shared, hp, TrainConfig(epochs=3, batch_size=4), on_epoch=seen.append)
    assert [h["epoch"] for h in res.history] == [0, 1, 2]
    assert seen == res.history
    assert set(res.history[0]) == {"epoch", "loss_total", "loss_in_domain", "loss_cross", "reg"}


def test_train_mu_zero_decouples_domains():
    domains, shared, spectra = _toy(3)
    hp = ModelHyperparams(input_dim=3, filter_dim=3, num_layers=2)
    cfg = TrainConfig(epochs=10, batch_size=8, cross_weight=0.0, learning_rate=0.01)
    seeds = domain_seeds(11, 2)
    joint = train(domains, spectra, shared, hp, cfg, seeds=seeds)
    for k in range(2):
        alone = train([domains[k]], [spectra[k]], SharedUserIndex(), hp, cfg, seeds=[seeds[k]])
        for name, t in joint.params[k].tensors().items():
            np.testing.assert_array_equal(t, alone.params[0].tensors()[name])


def test_train_frozen_tensor_unchanged():
    domains, shared, spectra = _toy()
    hp = ModelHyperparams(input_dim=2, filter_dim=2, num_layers=1)
    init = [init_parameters(hp, d.n_users, d.n_items, k) for k, d in enumerate(domains)]
    res = train(domains, spectra, shared, hp, TrainConfig(epochs=5, batch_size=8, frozen=("w_b",)), init=init)
    for p, q in zip(res.params, init):
        np.testing.assert_array_equal(p.mapping["w_b"], q.mapping["w_b"])
        assert not np.array_equal(p.x0, q.x0)


def test_train_loss_drops_below_ln2():
    domains, shared, spectra = _toy(1)
    hp = ModelHyperparams(input_dim=4, filter_dim=4, num_layers=2)
    cfg = TrainConfig(epochs=150, batch_size=64, learning_rate=0.01)
    res = train(domains, spectra, shared, hp, cfg)
    assert res.history[-1]["loss_in_domain"][0] / cfg.batch_size < math.log(2)
