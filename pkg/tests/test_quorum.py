import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agentfabric.attention import Modality
from agentfabric.embedding import embed_text
from agentfabric.errors import FabricError
from agentfabric.quorum import (
    PartialResult,
    QuorumExpectation,
    QuorumState,
    accept_partial,
    combine_confidence,
    confidence,
    maybe_serve,
    revise,
    serve_full,
)

DIM = 64


def expectation(n_sources=4, theta=0.75, modalities=None):
    sources = frozenset(f"s{i}" for i in range(n_sources))
    if modalities is None:
        modalities = frozenset(
            [Modality.RELATIONAL, Modality.VECTOR, Modality.STREAM, Modality.INFERENCE][
                :n_sources
            ]
        )
    return QuorumExpectation(
        query_id="q1",
        expected_sources=sources,
        expected_modalities=modalities,
        theta_q=theta,
    )


def partial(source, modality, text="customs delay evidence", at=10, query="q1"):
    return PartialResult(
        query_id=query,
        source_id=source,
        modality=modality,
        payload={"text": text},
        result_embedding=embed_text(text, DIM),
        arrived_at=at,
    )


def make_state(exp, **kw):
    return QuorumState(expectation=exp, **kw)


def test_combine_confidence_weighted_sum():
    assert combine_confidence(0.5, 0.5, 0.9) == pytest.approx(0.66, abs=1e-9)
    assert combine_confidence(1.0, 1.0, 1.0) == pytest.approx(1.0, abs=1e-12)


def test_zero_results_conf_zero():
    state = make_state(expectation())
    assert confidence(state) == 0.0


def test_coverage_definition():
    exp = expectation(4)
    state = make_state(exp)
    accept_partial(state, exp, partial("s0", Modality.RELATIONAL))
    assert state.coverage == pytest.approx(0.25)


def test_duplicate_source_replaces():
    exp = expectation(3)
    state = make_state(exp)
    accept_partial(state, exp, partial("s0", Modality.RELATIONAL, text="first"))
    accept_partial(state, exp, partial("s0", Modality.RELATIONAL, text="second"))
    assert state.coverage == pytest.approx(1 / 3)
    assert state.received["s0"].payload["text"] == "second"


def test_all_components_maximal():
    exp = expectation(2, modalities=frozenset({Modality.RELATIONAL, Modality.VECTOR}))
    state = make_state(exp)
    accept_partial(state, exp, partial("s0", Modality.RELATIONAL, text="same finding"))
    accept_partial(state, exp, partial("s1", Modality.VECTOR, text="same finding"))
    assert state.coverage == pytest.approx(1.0)
    assert state.diversity == pytest.approx(1.0)
    assert state.agreement == pytest.approx(1.0, abs=1e-9)
    assert state.conf == pytest.approx(1.0, abs=1e-9)


def test_unexpected_source_and_wrong_query_raise():
    exp = expectation(2)
    state = make_state(exp)
    with pytest.raises(FabricError):
        accept_partial(state, exp, partial("nope", Modality.RELATIONAL))
    with pytest.raises(FabricError):
        accept_partial(state, exp, partial("s0", Modality.RELATIONAL, query="other"))


def test_agreement_prior_below_two_results():
    exp = expectation(3)
    state = make_state(exp, agreement_prior=0.5)
    accept_partial(state, exp, partial("s0", Modality.RELATIONAL))
    assert state.agreement == pytest.approx(0.5)


def test_singleton_modality_diversity():
    exp = expectation(2, modalities=frozenset({Modality.STREAM}))
    state = make_state(exp)
    assert state.diversity == 0.0
    accept_partial(state, exp, partial("s0", Modality.STREAM))
    assert state.diversity == pytest.approx(1.0)


def test_maybe_serve_waits_below_threshold():
    exp = expectation(2, theta=0.75)
    state = make_state(exp)
    # one of two sources: coverage .5, diversity .5, agreement prior .5 -> 0.5
    accept_partial(state, exp, partial("s0", Modality.RELATIONAL))
    assert maybe_serve(state, exp, now=5) is None
    assert not state.served


def test_serves_at_exact_threshold():
    exp = expectation(
        2, theta=0.66, modalities=frozenset({Modality.RELATIONAL, Modality.VECTOR})
    )
    state = make_state(exp)
    e1 = np.zeros(DIM)
    e1[0] = 1.0
    e2 = np.zeros(DIM)
    # cosine 0.6 -> agreement 0.8; conf = .4 + .2 + .32 = 0.92... use weights to
    # land exactly on theta instead: coverage 1, diversity 1, agreement 0.9
    e2[0], e2[1] = 0.8, 0.6
    state2 = make_state(exp)
    pa = partial("s0", Modality.RELATIONAL)
    pb = partial("s1", Modality.VECTOR)
    object.__setattr__(pa, "result_embedding", e1)
    object.__setattr__(pb, "result_embedding", e2)
    accept_partial(state2, exp, pa)
    accept_partial(state2, exp, pb)
    assert state2.agreement == pytest.approx(0.9, abs=1e-12)
    exp_exact = expectation(
        2,
        theta=state2.conf,
        modalities=frozenset({Modality.RELATIONAL, Modality.VECTOR}),
    )
    answer = maybe_serve(state2, exp_exact, now=9)
    assert answer is not None  # >= semantics at the boundary
    assert state2.served and state2.served_at == 9
    assert answer["conf"] == pytest.approx(state2.conf)


def test_merged_answer_carries_tagged_payloads():
    exp = expectation(2, theta=0.1,
                      modalities=frozenset({Modality.RELATIONAL, Modality.VECTOR}))
    state = make_state(exp)
    accept_partial(state, exp, partial("s1", Modality.VECTOR, text="b"))
    accept_partial(state, exp, partial("s0", Modality.RELATIONAL, text="a"))
    answer = maybe_serve(state, exp, now=3)
    assert [r["source_id"] for r in answer["results"]] == ["s0", "s1"]
    assert {r["modality"] for r in answer["results"]} == {"relational", "vector"}


def test_serve_is_monotone_once():
    exp = expectation(2, theta=0.1)
    state = make_state(exp)
    accept_partial(state, exp, partial("s0", Modality.RELATIONAL))
    assert maybe_serve(state, exp, now=1) is not None
    with pytest.raises(FabricError):
        maybe_serve(state, exp, now=2)


def test_serve_full_requires_completeness():
    exp = expectation(2, theta=0.99)
    state = make_state(exp)
    accept_partial(state, exp, partial("s0", Modality.RELATIONAL))
    with pytest.raises(FabricError):
        serve_full(state, exp, now=1)
    accept_partial(state, exp, partial("s1", Modality.VECTOR))
    answer = serve_full(state, exp, now=2)
    assert answer is not None and state.served


def test_revise_identical_late_result_is_no_change():
    exp = expectation(2, theta=0.1)
    state = make_state(exp)
    accept_partial(state, exp, partial("s0", Modality.RELATIONAL, text="same"))
    maybe_serve(state, exp, now=1)
    late = partial("s1", Modality.VECTOR, text="same", at=30)
    assert revise(state, late) is None


def test_revise_antipodal_late_result_diverges():
    exp = expectation(2, theta=0.1)
    state = make_state(exp)
    p = partial("s0", Modality.RELATIONAL)
    accept_partial(state, exp, p)
    maybe_serve(state, exp, now=1)
    late = partial("s1", Modality.VECTOR, at=30)
    object.__setattr__(late, "result_embedding", -p.result_embedding)
    event = revise(state, late)
    assert event is not None
    assert event.divergence == pytest.approx(1.0, abs=1e-9)


def test_revise_bound_arithmetic():
    # normalized agreement (0.1 + 1)/2 = 0.55 < 0.6 -> revision
    exp = expectation(2, theta=0.1)
    state = make_state(exp)
    e1 = np.zeros(DIM)
    e1[0] = 1.0
    p = partial("s0", Modality.RELATIONAL)
    object.__setattr__(p, "result_embedding", e1)
    accept_partial(state, exp, p)
    maybe_serve(state, exp, now=1)
    late_emb = np.zeros(DIM)
    late_emb[0], late_emb[1] = 0.1, math.sqrt(1 - 0.01)
    late = partial("s1", Modality.VECTOR, at=30)
    object.__setattr__(late, "result_embedding", late_emb)
    event = revise(state, late)
    assert event is not None
    assert event.divergence == pytest.approx(0.45, abs=1e-9)


def test_revise_requires_served_state():
    exp = expectation(2)
    state = make_state(exp)
    with pytest.raises(FabricError):
        revise(state, partial("s0", Modality.RELATIONAL))


def test_conf_monotone_in_each_component():
    for i, lo_hi in enumerate([(0.2, 0.9), (0.1, 0.7), (0.0, 1.0)]):
        args_lo = [0.5, 0.5, 0.5]
        args_hi = list(args_lo)
        args_lo[i], args_hi[i] = lo_hi
        assert combine_confidence(*args_hi) >= combine_confidence(*args_lo)


def test_bad_weights_rejected():
    with pytest.raises(FabricError):
        make_state(expectation(), weights=(0.5, 0.5, 0.5))


@settings(max_examples=300, deadline=None)
@given(
    st.floats(min_value=0.0, max_value=1.0),
    st.floats(min_value=0.0, max_value=1.0),
    st.floats(min_value=0.0, max_value=1.0),
    st.floats(min_value=0.0, max_value=0.5),
)
def test_conf_bounded_and_monotone_in_coverage(cov, div, agr, bump):
    base = combine_confidence(cov, div, agr)
    assert 0.0 <= base <= 1.0
    more = combine_confidence(min(1.0, cov + bump), div, agr)
    assert more >= base - 1e-12
