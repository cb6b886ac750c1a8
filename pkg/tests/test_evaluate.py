import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isosft.errors import ShapeMismatch
from isosft.evaluate import edge_deviation, evaluate, frame_error
from isosft.synth import make_sequence

SEQ = make_sequence(frames=4)


def test_identity_scores_zero():
    rep = evaluate(SEQ.frames, SEQ.frames, SEQ.template)
    assert rep.sequence_mean == 0.0
    assert np.all(rep.per_frame_error == 0)
    assert rep.edge_deviation.max() < 1e-9


def test_single_vertex_offset():
    est = SEQ.frames.copy()
    est[2, 7] += [0.0, 3.0, 0.0]
    T, N = est.shape[:2]
    rep = evaluate(est, SEQ.frames, SEQ.template)
    assert rep.sequence_mean == pytest.approx(3.0 / (N * T), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=3, max_size=3))
def test_uniform_shift_scores_its_norm(shift):
    shift = np.array(shift)
    rep = evaluate(SEQ.frames + shift, SEQ.frames, SEQ.template)
    np.testing.assert_allclose(rep.per_frame_error, np.linalg.norm(shift),
                               atol=1e-9)
    assert abs(rep.sequence_mean - rep.per_frame_error.mean()) < 1e-12
    # a rigid shift keeps every edge length
    assert rep.edge_deviation.max() < 1e-9


def test_report_fields_and_timing():
    rng = np.random.default_rng(0)
    est = SEQ.frames + rng.normal(0, 1, SEQ.frames.shape)
    rep = evaluate(est, SEQ.frames, SEQ.template, [1.0, 2.0, 3.0, 2.0])
    assert rep.timing == {"total": 8.0, "mean": 2.0, "max": 3.0}
    d = rep.to_dict()
    assert d["sequence_mean"] == pytest.approx(np.mean(d["per_frame_error"]),
                                               abs=1e-12)
    assert d["sequence_std"] == pytest.approx(np.std(d["per_frame_error"]))
    np.testing.assert_allclose(rep.relative_error,
                               rep.per_frame_error / SEQ.diagonal())
    assert all(np.isfinite(v) and v >= 0 for v in d["per_frame_error"])


def test_edge_deviation_of_stretch():
    assert edge_deviation(SEQ.template, SEQ.template.vertices * 1.1) \
        == pytest.approx(0.1, rel=1e-9)


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        evaluate(SEQ.frames[:3], SEQ.frames, SEQ.template)
    with pytest.raises(ShapeMismatch):
        evaluate(SEQ.frames[:, :5], SEQ.frames[:, :5], SEQ.template)
    with pytest.raises(ShapeMismatch):
        frame_error(np.zeros((3, 3)), np.zeros((4, 3)))
