import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import entropy as scipy_entropy
from sklearn.base import clone

from trust_ssm.adaptation import (AdaptationConfig, AdaptationError, EntropyRanking, TestTimeAdapter, adapt_step,
                                  average_weights, pseudo_labels, rank_permutations, run_stream, select_top_k,
                                  shannon_entropy)
from trust_ssm.checkpoint import ModelConfig
from trust_ssm.data import CorruptionSpec, corrupt, gen_dataset
from trust_ssm.model import NORM_AFFINES, SSM_CORES, MicroVMamba, param_view
from trust_ssm.optim import Adam
from trust_ssm.ss2d import IDENTITY, Permutation, all_permutations


@pytest.fixture(scope="module")
def tiny_ckpt():
    return MicroVMamba(ModelConfig(embed_dim=8, state_dim=3), seed=11).checkpoint()


@pytest.fixture(scope="module")
def stream():
    ds = gen_dataset(77, 64, test_fraction=1.0)
    return corrupt(ds.images, CorruptionSpec("gaussian_noise", 3, 0)), ds.labels


def fraction_mean(values):
    return float(sum((Fraction(v) for v in values), Fraction(0)) / len(values))


# -- entropy & ranking --------------------------------------------------------

@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)), elements=st.floats(0.01, 10)))
def test_entropy_matches_scipy_and_is_bounded(w):
    p = w / w.sum(axis=1, keepdims=True)
    h = shannon_entropy(p, axis=1)
    np.testing.assert_allclose(h, scipy_entropy(p, axis=1), rtol=1e-12)
    assert np.all(h >= 0) and np.all(h <= np.log(p.shape[1]) + 1e-12)


def test_entropy_edge_cases():
    assert shannon_entropy([0.25] * 4) == pytest.approx(np.log(4))
    assert shannon_entropy([0.0, 1.0, 0.0]) == 0.0
    with pytest.raises(ValueError):
        shannon_entropy([0.5, 0.6])
    with pytest.raises(ValueError):
        shannon_entropy([-0.1, 1.1])


def test_ranking_is_sorted_and_serializable(tiny_ckpt, stream):
    model = MicroVMamba.from_checkpoint(tiny_ckpt)
    x, _ = stream
    rk = rank_permutations(model, [x[:32], x[32:]], seed=4)
    ent = [e for _, e in rk.entries]
    assert len(rk) == 24 and ent == sorted(ent)
    assert rk.n_batches == 2 and rk.n_samples == 64
    back = EntropyRanking.from_dict(json.loads(json.dumps(rk.to_dict())))
    assert back.entries == rk.entries and back.seed == 4
    assert select_top_k(rk, 3) == rk.permutations[:3]
    assert select_top_k(rk, 3, "highest") == rk.permutations[-3:]


def test_ranking_ties_break_lexicographically(tiny_ckpt, stream):
    model = MicroVMamba.from_checkpoint(tiny_ckpt)
    for name, t in list(model.params.items()):
        if ".cores.0." in name:
            for k in (1, 2, 3):
                model.params[name.replace(".cores.0.", f".cores.{k}.")].data = t.data.copy()
    rk = rank_permutations(model, [stream[0][:16]])
    assert len({e for _, e in rk.entries}) == 1
    assert rk.permutations == all_permutations()


def test_ranking_and_selection_errors(tiny_ckpt, stream):
    model = MicroVMamba.from_checkpoint(tiny_ckpt)
    with pytest.raises(ValueError):
        rank_permutations(model, [])
    with pytest.raises(ValueError):
        rank_permutations(model, [stream[0][:4]], pool=[IDENTITY, IDENTITY])
    with pytest.raises(ValueError):
        rank_permutations(model, [stream[0][:4]], pool=[])
    rk = rank_permutations(model, [stream[0][:4]], pool=all_permutations()[:5])
    for k in (0, 6):
        with pytest.raises(ValueError):
            select_top_k(rk, k)
    with pytest.raises(ValueError):
        select_top_k(rk, 2, "middle")


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 5)), elements=st.integers(-2, 2).map(float)))
def test_pseudo_labels_pick_lowest_index_on_ties(z):
    got = pseudo_labels(z)
    for row, k in zip(z, got):
        assert row[k] == row.max() and np.all(row[:k] < row.max())


# -- averaging ------------------------------------------------------------------

wide = st.floats(-1e300, 1e300, allow_nan=False, allow_infinity=False)
mixed = st.one_of(wide, st.floats(-1, 1), st.sampled_from([1e16, -1e16, 1.0, 0.1, 5e-324]))


@given(st.lists(arrays(np.float64, 3, elements=mixed), min_size=1, max_size=7))
def test_average_matches_exact_rational_oracle(cols):
    snaps = [{"w": c} for c in cols]
    got = average_weights(snaps)["w"]
    for i in range(3):
        assert got[i] == fraction_mean([c[i] for c in cols])


@given(st.lists(arrays(np.float64, 4, elements=mixed), min_size=2, max_size=6), st.randoms())
def test_average_is_order_invariant(cols, rnd):
    snaps = [{"w": c, "b": c[::-1].copy()} for c in cols]
    shuffled = snaps[:]
    rnd.shuffle(shuffled)
    a, b = average_weights(snaps), average_weights(shuffled)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


@given(arrays(np.float64, (2, 3), elements=mixed), st.integers(1, 8))
def test_average_of_identical_snapshots_is_identity(w, k):
    out = average_weights([{"w": w.copy()} for _ in range(k)])["w"]
    assert out.tobytes() == w.tobytes()


def test_average_near_overflow():
    big = np.finfo(np.float64).max
    out = average_weights([{"w": np.array([big, -big])}, {"w": np.array([big, big])}])["w"]
    np.testing.assert_array_equal(out, [big, 0.0])


def test_weighted_average_and_errors():
    a, b = {"w": np.array([0.0, 2.0])}, {"w": np.array([4.0, 6.0])}
    np.testing.assert_allclose(average_weights([a, b], weights=[3, 1])["w"], [1.0, 3.0])
    with pytest.raises(ValueError):
        average_weights([])
    with pytest.raises(ValueError):
        average_weights([a, {"v": np.zeros(2)}])
    with pytest.raises(ValueError):
        average_weights([a, {"w": np.zeros(3)}])


# -- single adaptation step -------------------------------------------------------

def test_adapt_step_contracts(tiny_ckpt, stream):
    model = MicroVMamba.from_checkpoint(tiny_ckpt)
    x = stream[0][:16]
    before = model.get_arrays()
    still = adapt_step(model, x, Permutation.parse("cdab"), Adam(lr=0.0))
    moved = adapt_step(model, x, Permutation.parse("cdab"), Adam(lr=1e-2), track_loss=True)
    assert all(model.params[n].data.tobytes() == a.tobytes() for n, a in before.items())
    assert set(still.params) == {n for n, _ in param_view(model, SSM_CORES)}
    assert all(still.params[n].tobytes() == before[n].tobytes() for n in still.params)
    assert any(moved.params[n].tobytes() != before[n].tobytes() for n in moved.params)
    assert np.isfinite(moved.loss_before) and np.isfinite(moved.loss_after)
    with pytest.raises(ValueError):
        adapt_step(model, x, IDENTITY, Adam(), iters=0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_adapt_step_aborts_on_non_finite(tiny_ckpt, stream):
    model = MicroVMamba.from_checkpoint(tiny_ckpt)
    x = stream[0][:8].copy()
    x[0, 0, 0, 0] = np.inf
    with pytest.raises(AdaptationError, match="badc"):
        adapt_step(model, x, Permutation.parse("badc"), Adam(), batch_id=3)


def test_adapt_step_from_explicit_start(tiny_ckpt, stream):
    model = MicroVMamba.from_checkpoint(tiny_ckpt)
    names = [n for n, _ in param_view(model, SSM_CORES)]
    start = {n: model.params[n].data + 0.01 for n in names}
    snap = adapt_step(model, stream[0][:8], IDENTITY, Adam(lr=0.0), start=start)
    assert all(snap.params[n].tobytes() == start[n].tobytes() for n in names)


# -- estimator ----------------------------------------------------------------------

def test_estimator_protocol(tiny_ckpt, stream):
    est = TestTimeAdapter(tiny_ckpt, k=2, lr=1e-3, batch_size=16)
    assert clone(est).get_params()["k"] == 2
    preds = est.fit_predict(stream[0])
    assert preds.shape == (64,) and est.n_batches_ == 4
    assert len(est.selected_) == 2 and est.ranking_ is not None
    assert est.predict(stream[0][:5]).shape == (5,)
    assert 0.0 <= est.score(*stream) <= 1.0
    est.audit_frozen()


@pytest.mark.parametrize("field,value", [("method", "magic"), ("mode", "offline"), ("execution", "gpu"),
                                         ("polarity", "middle"), ("k", 0), ("lr", -1.0), ("weighting", "x"),
                                         ("norm_mode", "group")])
def test_invalid_configuration(tiny_ckpt, stream, field, value):
    with pytest.raises(ValueError):
        TestTimeAdapter(tiny_ckpt, **{field: value}).fit(stream[0])


def test_requires_checkpoint(stream):
    with pytest.raises(ValueError):
        TestTimeAdapter(None).fit(stream[0])


def _run(ckpt, stream, **kw):
    cfg = AdaptationConfig(**{"batch_size": 16, "lr": 1e-2, **kw})
    return run_stream(ckpt, stream[0], cfg, stream[1])


def test_single_step_methods_coincide(tiny_ckpt, stream):
    naive = _run(tiny_ckpt, stream, method="trust-naive")
    rep = _run(tiny_ckpt, stream, method="repetition", k=1)
    ens = _run(tiny_ckpt, stream, method="ensemble", k=1, pool=("abcd",))
    pooled = _run(tiny_ckpt, stream, method="trust", k=1, pool=("abcd",))
    for other in (rep, ens, pooled):
        np.testing.assert_array_equal(other.predictions, naive.predictions)
    assert all(naive.theta_bar[n].tobytes() == pooled.theta_bar[n].tobytes() for n in naive.theta_bar)


def test_standard_mode_resets_every_batch(tiny_ckpt, stream):
    x, y = stream
    rk = TestTimeAdapter(tiny_ckpt, k=3, batch_size=16).fit(x).ranking_
    full = run_stream(tiny_ckpt, x, AdaptationConfig(k=3, batch_size=16, lr=1e-2, mode="standard"), y, ranking=rk)
    alone = run_stream(tiny_ckpt, x[32:48], AdaptationConfig(k=3, batch_size=16, lr=1e-2, mode="standard"),
                       y[32:48], ranking=rk)
    np.testing.assert_array_equal(full.predictions[32:48], alone.predictions)


def test_online_mode_carries_state(tiny_ckpt, stream):
    x, y = stream
    rk = TestTimeAdapter(tiny_ckpt, k=3, batch_size=16).fit(x).ranking_
    online = run_stream(tiny_ckpt, x, AdaptationConfig(k=3, batch_size=16, lr=5e-2), y, ranking=rk)
    standard = run_stream(tiny_ckpt, x, AdaptationConfig(k=3, batch_size=16, lr=5e-2, mode="standard"), y, ranking=rk)
    assert not all(online.theta_bar[n].tobytes() == standard.theta_bar[n].tobytes() for n in online.theta_bar)


def test_tent_only_moves_norm_affines(tiny_ckpt, stream):
    est = TestTimeAdapter(tiny_ckpt, method="tent", lr=1e-2, batch_size=16)
    est.fit_predict(stream[0])
    est.audit_frozen()
    norms = {n for n, _ in param_view(est.model_, NORM_AFFINES)}
    changed = {n for n, t in est.model_.params.items() if t.data.tobytes() != tiny_ckpt.params[n].tobytes()}
    assert changed and changed <= norms


def test_audit_catches_trunk_drift(tiny_ckpt, stream):
    est = TestTimeAdapter(tiny_ckpt, k=1, batch_size=16).fit(stream[0])
    est.model_.params["head.bias"].data = est.model_.params["head.bias"].data + 1.0
    with pytest.raises(AssertionError, match="head.bias"):
        est.audit_frozen()


def test_zero_lr_methods_equal_source(tiny_ckpt, stream):
    src = _run(tiny_ckpt, stream, method="source")
    for m in ("trust", "tent", "repetition"):
        res = _run(tiny_ckpt, stream, method=m, lr=0.0, k=2)
        np.testing.assert_array_equal(res.predictions, src.predictions)
        assert res.accuracy == src.accuracy


def test_diversity_and_probe_diagnostics(tiny_ckpt, stream):
    x, y = stream
    still = run_stream(tiny_ckpt, x, AdaptationConfig(k=3, batch_size=16, lr=0.0), y)
    assert set(still.diversity) == {n for n, _ in param_view(MicroVMamba.from_checkpoint(tiny_ckpt), SSM_CORES)}
    assert all(v["norm_std"] == 0.0 for v in still.diversity.values())
    res = run_stream(tiny_ckpt, x, AdaptationConfig(k=3, batch_size=16, lr=1e-1), y, probe_perms=["abcd", "dcba"])
    assert any(v["norm_std"] > 0 for v in res.diversity.values())
    assert set(res.probe_accuracy) == {"abcd", "dcba"}
    assert res.probe_accuracy["abcd"] == res.accuracy


def test_entropy_weighting_runs(tiny_ckpt, stream):
    res = _run(tiny_ckpt, stream, k=3, weighting="entropy")
    assert res.predictions.shape == (64,) and np.isfinite(res.accuracy)
    assert len(res.batch_accuracy) == 4
