import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dilsearch import gates as G
from dilsearch.convert import convert_to_dilated
from dilsearch.data import GenConfig, gen_blobs
from dilsearch.gradcheck import check
from dilsearch.network import (
    Parameters,
    build_network,
    flop_count,
    gated_unit_forward,
    init_params,
    parameter_count,
    residual_unit_forward,
)
from dilsearch.tensor import Tensor, mul, tsum
from dilsearch.train import TrainConfig, train

EULER_GAMMA = 0.5772156649015329


def state(log_alpha, tau=1.0, candidates=G.DEFAULT_CANDIDATES):
    return G.GateState(Tensor(np.asarray(log_alpha, dtype=np.float64), requires_grad=True), tau, tuple(candidates))


def entropy(z):
    z = np.clip(z, 1e-300, 1.0)
    return -(z * np.log(z)).sum(axis=-1)


# ------------------------------------------------------------------ Gumbel noise

def test_gumbel_fixed_point():
    assert G.gumbel_sample(1, None, uniform=[1 / math.e])[0] == pytest.approx(0.0, abs=1e-15)


def test_gumbel_clamps_uniform():
    g = G.gumbel_sample(2, None, uniform=[0.0, 1.0])
    assert np.all(np.isfinite(g))


def test_gumbel_mean_is_euler_gamma():
    g = G.gumbel_sample(10**6, np.random.default_rng(0))
    assert abs(g.mean() - EULER_GAMMA) < 0.01


def test_gumbel_stream_is_seeded():
    a = G.gumbel_sample(100, np.random.default_rng(42))
    b = G.gumbel_sample(100, np.random.default_rng(42))
    np.testing.assert_array_equal(a, b)


# ------------------------------------------------------------------ relaxed samples

def test_zero_noise_uniform_alpha_is_uniform():
    for tau in (0.1, 1.0, 5.0):
        z = G.gumbel_softmax_sample(state(np.zeros(5), tau), None, noise=np.zeros(5))
        np.testing.assert_allclose(z.data, np.full(5, 0.2), rtol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=1, max_size=8), st.floats(0.01, 10.0), st.integers(0, 2**32 - 1))
def test_samples_are_distributions(alpha, tau, seed):
    cands = tuple(2**i for i in range(len(alpha)))
    z = G.gumbel_softmax_sample(state(alpha, tau, cands), np.random.default_rng(seed)).data
    assert np.all(z >= 0) and abs(z.sum() - 1.0) < 1e-6


def test_low_temperature_approaches_argmax():
    rng = np.random.default_rng(3)
    alpha = rng.standard_normal(5)
    noise = G.gumbel_sample(5, rng)
    z = G.gumbel_softmax_sample(state(alpha, 1e-3), None, noise=noise).data
    assert z[np.argmax(alpha + noise)] > 1 - 1e-9


def test_rejects_nonpositive_tau_and_bad_candidates():
    with pytest.raises(ValueError):
        G.gumbel_softmax_sample(state(np.zeros(5), 0.0), np.random.default_rng(0))
    with pytest.raises(ValueError):
        state(np.zeros(3), 1.0, (1, 4, 2)).validate()
    with pytest.raises(ValueError):
        state(np.zeros(3), 1.0, (1, 2)).validate()


@pytest.mark.parametrize("tau", [0.1, 1.0, 5.0])
def test_two_way_frequency(tau):
    rng = np.random.default_rng(int(tau * 10))
    st_ = state([math.log(2.0), 0.0], tau, (1, 2))
    hits = sum(int(np.argmax(G.gumbel_softmax_sample(st_, rng).data)) == 0 for _ in range(10**4))
    assert abs(hits / 1e4 - 2 / 3) < 0.02


def argmax_frequencies(alpha, tau, n, seed):
    rng = np.random.default_rng(seed)
    noise = G.gumbel_sample((n, len(alpha)), rng)
    y = (alpha + noise) / tau
    z = np.exp(y - y.max(axis=1, keepdims=True))
    z /= z.sum(axis=1, keepdims=True)
    return np.bincount(z.argmax(axis=1), minlength=len(alpha)) / n, z


def test_gumbel_max_law_and_entropy_ordering():
    alpha = np.log(np.array([0.05, 0.1, 0.2, 0.3, 0.35]))
    p = np.exp(alpha) / np.exp(alpha).sum()
    n = 10**4
    ent = []
    for tau in (1.0, 0.5, 0.1):
        freq, z = argmax_frequencies(alpha, tau, n, seed=int(tau * 100))
        assert np.all(np.abs(freq - p) <= 3 * np.sqrt(p * (1 - p) / n))
        ent.append(entropy(z).mean())
    assert ent[0] > ent[1] > ent[2]


def test_relaxed_sample_grad_wrt_log_alpha():
    rng = np.random.default_rng(5)
    noise = G.gumbel_sample(5, rng)
    proj = Tensor(rng.standard_normal(5))
    fn = lambda a: tsum(mul(G.gumbel_softmax_sample(G.GateState(a, 0.7, G.DEFAULT_CANDIDATES), None, noise), proj))  # noqa: E731
    assert check(fn, [Tensor(rng.standard_normal(5), requires_grad=True)]) < 1e-4


# ------------------------------------------------------------------ gated unit

@pytest.fixture(scope="module")
def gated():
    base = convert_to_dilated(build_network("light_v2", 2))
    spec = G.make_searchable(base)
    params = init_params(spec, 7, np.float64)
    return spec, params


def test_make_searchable_marks_last_four(gated):
    spec, _ = gated
    assert spec.gated_units() == ["layer3.0", "layer3.1", "layer4.0", "layer4.1"]
    assert all(spec.unit(n).candidates == G.DEFAULT_CANDIDATES for n in spec.gated_units())


@pytest.mark.parametrize("i", range(5))
def test_one_hot_gate_matches_plain_unit(gated, i):
    spec, params = gated
    name = "layer4.0"
    unit = spec.unit(name)
    d = unit.candidates[i]
    plain_unit = G.apply_assignment(spec, G.DilationAssignment({name: d})).unit(name)
    plain = Parameters(
        {k.replace(f"{name}.branch{i}.", f"{name}."): v for k, v in params.tensors.items()},
        {k.replace(f"{name}.branch{i}.", f"{name}."): v for k, v in params.buffers.items()},
    )
    x = Tensor(np.random.default_rng(i).standard_normal((1, unit.in_channels, 12, 12)))
    onehot = Tensor(np.eye(5)[i])
    a = gated_unit_forward(x, unit, params, name, onehot).data
    b = residual_unit_forward(x, plain_unit, plain, name).data
    assert a.tobytes() == b.tobytes()


def test_zero_branches_leave_skip(gated):
    spec, params = gated
    name = "layer3.1"  # identity skip
    unit = spec.unit(name)
    zeroed = params.copy()
    for k, v in zeroed.tensors.items():
        if k.startswith(name + ".branch") and "conv" in k:
            v.data = np.zeros_like(v.data)
    x0 = np.abs(np.random.default_rng(0).standard_normal((1, unit.in_channels, 6, 6)))
    out = gated_unit_forward(Tensor(x0), unit, zeroed, name, Tensor(np.full(5, 0.2))).data
    np.testing.assert_array_equal(out, x0)


def test_gate_length_mismatch_rejected(gated):
    spec, params = gated
    unit = spec.unit("layer3.1")
    with pytest.raises(ValueError, match="expected \\(5,\\)"):
        gated_unit_forward(Tensor(np.zeros((1, unit.in_channels, 4, 4))), unit, params, "layer3.1", Tensor(np.ones(3)))


def test_loss_grad_wrt_log_alpha_through_gated_unit(gated):
    spec, params = gated
    name = "layer4.1"
    unit = spec.unit(name)
    rng = np.random.default_rng(9)
    noise = G.gumbel_sample(5, rng)
    x = Tensor(rng.standard_normal((1, unit.in_channels, 6, 6)))
    proj = Tensor(rng.standard_normal((1, unit.out_channels, 6, 6)))

    def fn(log_alpha):
        z = G.gumbel_softmax_sample(G.GateState(log_alpha, 0.8, unit.candidates), None, noise)
        return tsum(mul(gated_unit_forward(x, unit, params, name, z), proj))

    assert check(fn, [Tensor(rng.standard_normal(5) * 0.5, requires_grad=True)]) < 1e-3


# ------------------------------------------------------------------ annealing

def test_anneal_endpoints_and_midpoint():
    sched = G.AnnealSchedule.over(1000)
    assert G.anneal_temperature(0, sched) == 5.0
    assert G.anneal_temperature(10**7, sched) == 0.1
    assert G.anneal_temperature(500, sched) == pytest.approx(math.sqrt(0.5), rel=1e-12)
    taus = [G.anneal_temperature(s, sched) for s in range(0, 1500, 7)]
    assert all(a >= b for a, b in zip(taus, taus[1:]))


def test_anneal_rejects_bad_schedule():
    with pytest.raises(ValueError):
        G.anneal_temperature(0, G.AnnealSchedule(0.0, 0.1, 1.0))
    with pytest.raises(ValueError):
        G.anneal_temperature(0, G.AnnealSchedule(5.0, -1.0, 1.0))
    with pytest.raises(ValueError):
        G.anneal_temperature(-1, G.AnnealSchedule())


# ------------------------------------------------------------------ decoding

def test_decode_argmax_and_ties():
    a = G.decode_gates({"u": state([0, 5, 0, 0, 0])})
    b = G.decode_gates({"u": state(np.zeros(5))})
    c = G.decode_gates({"u": state([0, 0, 3, 3, 1])})
    assert a.dilations == {"u": 2} and b.dilations == {"u": 1} and c.dilations == {"u": 4}


@pytest.mark.parametrize("dilations", [(1, 1, 1, 1), (8, 8, 8, 8), (16, 2, 4, 1)])
def test_decoded_network_has_zero_overhead(dilations):
    base = convert_to_dilated(build_network("light_v1", 2))
    spec = G.make_searchable(base)
    decoded = G.apply_assignment(spec, G.DilationAssignment(dict(zip(spec.gated_units(), dilations))))
    assert decoded.gated_units() == []
    assert parameter_count(decoded) == parameter_count(base)
    assert flop_count(decoded, (1, 3, 256, 320)) == flop_count(base, (1, 3, 256, 320))


# ------------------------------------------------------------------ search loop

@pytest.fixture(scope="module")
def tiny_blobs():
    return gen_blobs(GenConfig(height=32, width=32, count=8, seed=1))


def test_single_candidate_search_is_plain_training(tiny_blobs):
    base = convert_to_dilated(build_network("light_v2", 2))
    cfg = G.SearchConfig(steps=4, batch_size=2, candidates=(1,), seed=3)
    res = G.run_search(base, tiny_blobs, cfg)
    assert set(res.assignment.dilations.values()) == {1}
    for n, st_ in res.states.items():
        assert st_.log_alpha.data.tolist() == [0.0]

    gated = G.make_searchable(base, (1,))
    init = init_params(gated, cfg.seed)
    renamed = Parameters(
        {k.replace(".branch0.", "."): Tensor(v.data, requires_grad=True) for k, v in init.tensors.items() if "gate" not in k},
        {k.replace(".branch0.", "."): v for k, v in init.buffers.items()},
    )
    plain = G.apply_assignment(gated, res.assignment)
    _, records = train(plain, tiny_blobs, cfg.train_config(0), params=renamed, recompute=False)
    assert [r.loss for r in records] == [row[1] for row in res.trace]


def test_search_trace_and_log(tiny_blobs, tmp_path):
    base = convert_to_dilated(build_network("light_v2", 2))
    res = G.run_search(base, tiny_blobs, G.SearchConfig(steps=3, batch_size=2, seed=0))
    assert len(res.trace) == 3
    for _, loss, tau, probs in res.trace:
        assert np.isfinite(loss) and tau > 0
        for p in probs.values():
            assert abs(p.sum() - 1.0) < 1e-9
    path = tmp_path / "search.csv"
    G.write_search_log(res, path)
    rows = list(csv.reader(open(path)))
    assert rows[0][:3] == ["step", "loss", "tau"] and len(rows[0]) == 3 + 4 * 5
    assert len(rows) == 4


def test_search_requires_converted_base(tiny_blobs):
    with pytest.raises(ValueError, match="converted"):
        G.run_search(build_network("light_v2", 2), tiny_blobs, G.SearchConfig(steps=1))
