import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedpac.linalg import make_rng
from fedpac.oracles import flat_drift, flatten_state, jacobi_eigh, polar_factor, tail_energy
from fedpac.preconditioners import (
    ALL_FIELDS,
    AVERAGED_FIELDS,
    VARIANTS,
    PreconditionerState,
    StateError,
    apply_precond,
    compress_state,
    compressed_rank,
    decompress_state,
    default_hyper,
    deserialize_state,
    init_state,
    serialize_state,
    state_average,
    state_distance,
    state_nbytes,
    update_state,
)


def quad_hvp(H):
    """Exact HVP for a single-layer quadratic with flattened Hessian H."""
    def oracle(vs):
        v = vs[0]
        return [(H @ v.reshape(-1)).reshape(v.shape)]
    return oracle


def random_state(variant, shapes, rng, steps=3, **hyper):
    st_ = init_state(variant, shapes, default_hyper(variant, **hyper))
    for _ in range(steps):
        grads = [rng.standard_normal(s) for s in shapes]
        oracle = (lambda vs: [2.0 * v for v in vs]) if variant == "sophia" else None
        st_ = update_state(st_, grads, oracle, rng)
    return st_


def single(variant, hyper=None, **fields):
    hp = hyper or default_hyper(variant)
    return PreconditionerState(variant, ({k: np.asarray(v, dtype=float) for k, v in fields.items()},), hp, 1)


# -- update_state ------------------------------------------------------------

def test_muon_no_momentum_copies_grad():
    g = make_rng(0).standard_normal((3, 2))
    s = update_state(init_state("muon", [(3, 2)], default_hyper("muon", beta1=0.0)), [g])
    assert np.array_equal(s.layers[0]["m"], g)


def test_soap_first_step_factors():
    s = update_state(init_state("soap", [(2, 2)], default_hyper("soap", beta2=0.95)), [np.eye(2)])
    assert np.allclose(s.layers[0]["L"], 0.05 * np.eye(2))
    assert np.allclose(s.layers[0]["R"], 0.05 * np.eye(2))


@pytest.mark.parametrize("H", [np.diag([2.0, 6.0]), np.array([[2.0, 1.0], [1.0, 6.0]])])
def test_hutchinson_unbiased_within_3se(H):
    hp = default_hyper("sophia", beta2=0.0)
    rng = make_rng(11)
    draws = []
    for _ in range(10_000):
        s = update_state(init_state("sophia", [(2, 1)], hp), [np.zeros((2, 1))], quad_hvp(H), rng)
        draws.append(s.layers[0]["h"][:, 0])
    draws = np.array(draws)
    mean = draws.mean(axis=0)
    se = draws.std(axis=0, ddof=1) / math.sqrt(len(draws))
    assert np.all(np.abs(mean - np.diag(H)) <= 3 * se + 1e-12)


def test_sophia_requires_oracle_and_rng():
    s = init_state("sophia", [(2, 1)])
    with pytest.raises(StateError):
        update_state(s, [np.ones((2, 1))], None, make_rng(0))
    with pytest.raises(StateError):
        update_state(s, [np.ones((2, 1))], quad_hvp(np.eye(2)), None)


def test_sophia_hessian_freq_skips_refresh():
    hp = default_hyper("sophia", hessian_freq=2)
    s = init_state("sophia", [(2, 1)], hp)
    s = update_state(s, [np.ones((2, 1))], quad_hvp(np.eye(2)), make_rng(0))
    h1 = s.layers[0]["h"].copy()
    s = update_state(s, [np.ones((2, 1))], None, None)
    assert np.array_equal(s.layers[0]["h"], h1)


def test_grad_shape_mismatch():
    with pytest.raises(ValueError):
        update_state(init_state("muon", [(2, 2)]), [np.ones((3, 2))])


def test_update_does_not_mutate():
    s = random_state("soap", [(3, 2)], make_rng(1))
    before = serialize_state(s)
    update_state(s, [np.ones((3, 2))])
    assert serialize_state(s) == before


# -- apply_precond -----------------------------------------------------------

def test_sophia_clip_saturates():
    s = single("sophia", default_hyper("sophia", eps=1e-12, clip_rho=1.0), m=[[10.0], [-10.0]], h=[[0.0], [0.0]])
    assert np.array_equal(apply_precond(s, [np.zeros((2, 1))])[0], np.array([[1.0], [-1.0]]))


def test_soap_adam_fixed_ratio():
    m = np.array([[0.5, -2.0], [3.0, -0.1]])
    hp = default_hyper("soap")
    s = single("soap", hp, L=np.eye(2), R=np.eye(2), Q_L=np.eye(2), Q_R=np.eye(2), M=m, V=m * m)
    out = apply_precond(s, [m])[0]
    assert np.allclose(out, np.sign(m) / (1.0 + hp.eps / np.abs(m)))


def test_muon_diag_is_polar_factor():
    hp = default_hyper("muon", beta1=0.0, ns_variant="classic", ns_steps=10)
    G = np.diag([3.0, 1.0])
    s = update_state(init_state("muon", [(2, 2)], hp), [G])
    out = apply_precond(s, [G])[0]
    assert np.allclose(out, polar_factor(G), atol=1e-6)
    assert np.allclose(out, np.eye(2), atol=1e-6)


def test_muon_default_diag_close_to_identity():
    G = np.diag([3.0, 1.0])
    s = update_state(init_state("muon", [(2, 2)], default_hyper("muon", beta1=0.0)), [G])
    out = apply_precond(s, [G])[0]
    # default quintic iteration lands in a band around the polar factor
    assert np.allclose(out, np.diag(np.diag(out)), atol=1e-12)
    assert np.all(np.abs(np.diag(out) - 1.0) < 0.35)


def test_muon_vector_layer_is_momentum():
    g = np.array([[1.0], [-2.0], [0.5]])
    s = update_state(init_state("muon", [(3, 1)], default_hyper("muon", beta1=0.0)), [g])
    assert np.array_equal(apply_precond(s, [g])[0], g)


def test_apply_on_fresh_state_raises():
    with pytest.raises(StateError, match="uninitialized"):
        apply_precond(init_state("soap", [(2, 2)]), [np.ones((2, 2))])


def test_apply_reads_same_step_state():
    # P(g) after update_state(g) must differ from P(g) with the pre-update state
    rng = make_rng(4)
    s0 = random_state("soap", [(3, 3)], rng)
    g = 10.0 * rng.standard_normal((3, 3))
    s1 = update_state(s0, [g])
    assert not np.allclose(apply_precond(s1, [g])[0], apply_precond(s0, [g])[0])


# -- operator assumptions (boundedness, coercivity) --------------------------

@pytest.mark.parametrize("variant", VARIANTS)
def test_boundedness_1000_draws(variant):
    rng = make_rng(21)
    shapes = [(4, 3), (4, 1)]
    worst = 0.0
    hp = default_hyper(variant)
    for _ in range(1000):
        s = random_state(variant, shapes, rng, steps=int(rng.integers(1, 4)))
        g = [rng.standard_normal(sh) * 10.0 ** rng.uniform(-3, 3) for sh in shapes]
        s = update_state(s, g, (lambda vs: [2.0 * v for v in vs]) if variant == "sophia" else None, rng)
        out = apply_precond(s, g)
        assert all(np.all(np.isfinite(o)) for o in out)
        n_out = math.sqrt(sum(float(np.sum(o * o)) for o in out))
        n_g = math.sqrt(sum(float(np.sum(x * x)) for x in g))
        worst = max(worst, n_out / n_g)
        if variant == "sophia":
            assert n_out <= hp.clip_rho * math.sqrt(sum(o.size for o in out)) + 1e-12
    assert math.isfinite(worst)


@pytest.mark.parametrize("variant", VARIANTS)
def test_coercivity_momentum_off_1000_draws(variant):
    rng = make_rng(22)
    shapes = [(3, 5), (3, 1)]
    violations = 0
    for _ in range(1000):
        s = random_state(variant, shapes, rng, steps=int(rng.integers(0, 3)), beta1=0.0)
        g = [rng.standard_normal(sh) for sh in shapes]
        s = update_state(s, g, (lambda vs: [2.0 * v for v in vs]) if variant == "sophia" else None, rng)
        inner = sum(float(np.sum(x * o)) for x, o in zip(g, apply_precond(s, g)))
        violations += inner <= 0.0
    assert violations == 0


# -- state_average -----------------------------------------------------------

@pytest.mark.parametrize("variant", VARIANTS)
def test_average_single_is_identity(variant):
    s = random_state(variant, [(3, 2)], make_rng(5))
    if variant == "soap":
        # make Q an exact eigenbasis so the recompute is a fixed point
        layer = dict(s.layers[0])
        for P, Q in (("L", "Q_L"), ("R", "Q_R")):
            _, V = jacobi_eigh(layer[P])
            layer[Q] = V * np.sign(np.diag(V))
        s = PreconditionerState("soap", (layer,), s.hyper, s.step_count)
        avg = state_average([s])
        for name in ALL_FIELDS["soap"]:
            assert np.allclose(avg.layers[0][name], layer[name], atol=1e-8)
    else:
        avg = state_average([s])
        assert serialize_state(avg) == serialize_state(s)


def test_average_muon_pair():
    hp = default_hyper("muon")
    a = single("muon", hp, m=[[1.0, 1.0]])
    b = single("muon", hp, m=[[3.0, 3.0]])
    assert np.array_equal(state_average([a, b]).layers[0]["m"], np.array([[2.0, 2.0]]))


def test_average_soap_factors_and_q():
    hp = default_hyper("soap")
    z = np.zeros((2, 2))
    a = single("soap", hp, L=np.diag([1.0, 0.0]), R=np.eye(2), Q_L=np.eye(2), Q_R=np.eye(2), M=z, V=z)
    b = single("soap", hp, L=np.diag([0.0, 1.0]), R=np.eye(2), Q_L=np.eye(2), Q_R=np.eye(2), M=z, V=z)
    avg = state_average([a, b]).layers[0]
    assert np.allclose(avg["L"], 0.5 * np.eye(2))
    Q = avg["Q_L"]
    assert np.allclose(Q.T @ Q, np.eye(2))
    D = Q.T @ avg["L"] @ Q
    assert np.allclose(D, np.diag(np.diag(D)))


@pytest.mark.parametrize("variant", VARIANTS)
def test_average_permutation_invariant(variant):
    rng = make_rng(6)
    states = [random_state(variant, [(3, 2), (3, 1)], rng) for _ in range(4)]
    a = state_average(states)
    b = state_average(states[::-1])
    for la, lb in zip(a.layers, b.layers):
        for name in ALL_FIELDS[variant]:
            assert np.allclose(la[name], lb[name], atol=1e-12)


def test_average_rejects_mixed_variants():
    with pytest.raises(StateError):
        state_average([init_state("muon", [(2, 2)]), init_state("soap", [(2, 2)])])


# -- state_distance ----------------------------------------------------------

@pytest.mark.parametrize("variant", VARIANTS)
def test_distance_self_zero(variant):
    s = random_state(variant, [(3, 2)], make_rng(7))
    assert state_distance(s, s) == 0.0
    assert all(v == 0.0 for v in state_distance(s, s, "spectral_layerwise"))


def test_distance_muon_closed_form():
    hp = default_hyper("muon")
    a = single("muon", hp, m=np.diag([3.0, 4.0]))
    b = single("muon", hp, m=np.zeros((2, 2)))
    assert np.isclose(state_distance(a, b), 25.0)
    assert np.isclose(state_distance(a, b, "spectral_layerwise")[0], 4.0, rtol=1e-6)


@pytest.mark.parametrize("variant", VARIANTS)
def test_distance_matches_flat_oracle(variant):
    rng = make_rng(8)
    a = random_state(variant, [(3, 2), (2, 1)], rng)
    b = random_state(variant, [(3, 2), (2, 1)], rng)
    fa, fb = flatten_state(a, AVERAGED_FIELDS[variant]), flatten_state(b, AVERAGED_FIELDS[variant])
    assert abs(state_distance(a, b) - float(np.sum((fa - fb) ** 2))) <= 1e-10
    assert np.isclose(state_distance(a, b), state_distance(b, a), rtol=0, atol=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(VARIANTS))
def test_distance_symmetric_nonneg(seed, variant):
    rng = make_rng(seed)
    a = random_state(variant, [(2, 3)], rng, steps=2)
    b = random_state(variant, [(2, 3)], rng, steps=2)
    d = state_distance(a, b)
    assert d == state_distance(b, a) and d > 0.0


def test_flat_drift_oracle_agrees_with_average():
    rng = make_rng(9)
    states = [random_state("soap", [(3, 3)], rng) for _ in range(5)]
    center = state_average(states)
    ours = sum(state_distance(s, center) for s in states) / 5
    assert abs(ours - flat_drift(states, AVERAGED_FIELDS["soap"])) <= 1e-9 * max(1.0, ours)


# -- compression -------------------------------------------------------------

def test_compress_full_rank_exact():
    s = random_state("soap", [(5, 4)], make_rng(10))
    cs, nbytes = compress_state(s, 1.0)
    back = decompress_state(cs, s)
    for name in AVERAGED_FIELDS["soap"]:
        assert np.allclose(back.layers[0][name], s.layers[0][name], atol=1e-8)
    assert nbytes >= state_nbytes(s, AVERAGED_FIELDS["soap"])


def test_compress_rank_one_exact():
    u, v = np.array([[1.0], [2.0], [3.0], [4.0]]), np.array([[1.0, -1.0, 0.5, 2.0]])
    s = single("muon", default_hyper("muon"), m=u @ v)
    cs, _ = compress_state(s, 0.01)
    assert np.allclose(decompress_state(cs).layers[0]["m"], u @ v, atol=1e-8)


def test_compress_matches_tail_energy():
    s = random_state("muon", [(12, 8)], make_rng(12))
    cs, _ = compress_state(s, 0.25)
    r = compressed_rank((12, 8), 0.25)
    err = np.linalg.norm(decompress_state(cs).layers[0]["m"] - s.layers[0]["m"])
    assert abs(err - tail_energy(s.layers[0]["m"], r)) <= 1e-8


def test_compress_soap_64_ratio():
    s = random_state("soap", [(64, 64)], make_rng(13), steps=1)
    _, nbytes = compress_state(s, 0.1)
    dense = state_nbytes(s, AVERAGED_FIELDS["soap"])
    r = compressed_rank((64, 64), 0.1)
    assert r == 7
    assert nbytes == 8 * 4 * r * (64 + 64 + 1)
    # 7 of 64 ranks kept, so the ratio sits a little above 0.2
    assert 0.1 <= nbytes / dense <= 0.23


def test_compress_invalid_fraction():
    with pytest.raises(ValueError):
        compress_state(init_state("muon", [(2, 2)]), 0.0)


# -- serialization -----------------------------------------------------------

@pytest.mark.parametrize("variant", VARIANTS)
def test_serialize_roundtrip(variant):
    s = random_state(variant, [(3, 2), (3, 1)], make_rng(14))
    blob = serialize_state(s)
    back, off = deserialize_state(blob)
    assert off == len(blob)
    assert back.variant == s.variant and back.step_count == s.step_count and back.hyper == s.hyper
    assert serialize_state(back) == blob


def test_deserialize_rejects_garbage():
    with pytest.raises(ValueError):
        deserialize_state(b"XXXX" + bytes(40))
