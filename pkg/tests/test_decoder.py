"""Sliding-window decoding: window math, thresholding, dedup fold."""

import json

import numpy as np
import numpy.testing as npt
import pytest

from signrec.errors import ConfigurationError
from signrec.decoder import (
    DecodeConfig,
    DecodeTrace,
    WindowPrediction,
    accept_stream,
    classify_window,
    decode,
    decode_trace,
    save_trace,
    trace_to_json,
    windows,
)
from signrec.featurestore import ARM_DIM, HAND_DIM, LIP_DIM, FeatureSequence, FrameFeatures


def flat_sequence(n):
    return FeatureSequence(
        tuple(
            FrameFeatures(np.zeros(HAND_DIM), np.zeros(ARM_DIM), np.zeros(LIP_DIM))
            for _ in range(n)
        )
    )


def scripted_model(prob_rows):
    """Callable model that replays a fixed list of probability vectors."""
    state = {"i": 0}

    def fn(sb):
        row = prob_rows[min(state["i"], len(prob_rows) - 1)]
        state["i"] += 1
        return np.asarray(row, dtype=np.float64)

    return fn


def dist(k, winner, p):
    row = np.full(k, (1.0 - p) / (k - 1))
    row[winner] = p
    return row


# ---------------------------------------------------------------------------
# windows


def test_window_offsets_examples():
    cfg = DecodeConfig()
    assert windows(40, cfg) == [0]
    assert windows(95, cfg) == list(range(0, 56, 5))
    assert len(windows(95, cfg)) == 12
    assert windows(20, cfg) == [0]
    assert windows(1, cfg) == [0]


def test_window_offsets_match_brute_force():
    cfg = DecodeConfig()
    for L in range(1, 301):
        got = windows(L, cfg)
        if L < cfg.window:
            assert got == [0]
        else:
            want = [s for s in range(0, L + 1, cfg.step) if s + cfg.window <= L]
            assert got == want
            assert len(got) == (L - cfg.window) // cfg.step + 1
    with pytest.raises(ValueError):
        windows(0, cfg)


def test_decode_config_validation():
    with pytest.raises(ConfigurationError):
        DecodeConfig(window=0)
    with pytest.raises(ConfigurationError):
        DecodeConfig(step=0)
    with pytest.raises(ConfigurationError):
        DecodeConfig(threshold=0.0)
    with pytest.raises(ConfigurationError):
        DecodeConfig(threshold=1.0)


# ---------------------------------------------------------------------------
# classify_window


def test_classify_window_threshold_boundary():
    cfg = DecodeConfig()
    frames = flat_sequence(40).frames
    below = classify_window(scripted_model([dist(101, 2, 0.19)]), frames, cfg, start=10)
    assert below.word is None and below.start == 10
    npt.assert_allclose(below.confidence, 0.19, rtol=1e-12)

    above = classify_window(scripted_model([dist(5, 2, 0.21)]), frames, cfg)
    assert above.word == 2
    npt.assert_allclose(above.confidence, 0.21, rtol=1e-12)


def test_classify_window_uniform_101_is_null():
    cfg = DecodeConfig()
    pred = classify_window(
        scripted_model([np.full(101, 1.0 / 101)]), flat_sequence(12).frames, cfg
    )
    assert pred.word is None
    npt.assert_allclose(pred.confidence, 1.0 / 101, rtol=1e-12)


# ---------------------------------------------------------------------------
# accept_stream (the dedup state machine)


def wp(word, conf=0.5, start=0):
    return WindowPrediction(start, word, conf)


@pytest.mark.parametrize(
    "stream,expected",
    [
        ([wp("A", 0.6), wp("A", 0.55), wp(None), wp("B", 0.3)], ["A", "B"]),
        ([wp("A", 0.6), wp(None), wp("A", 0.7)], ["A"]),
        ([wp(None), wp(None)], []),
        ([], []),
        ([wp("A")], ["A"]),
        ([wp("A"), wp("B"), wp("A")], ["A", "B", "A"]),
        ([wp("A"), wp("A"), wp("A")], ["A"]),
        ([wp(None), wp("A"), wp(None), wp(None), wp("A"), wp("B")], ["A", "B"]),
        ([wp("A"), wp("B"), wp("B"), wp(None), wp("B"), wp("C")], ["A", "B", "C"]),
        ([wp("A"), wp(None), wp("B"), wp(None), wp("A")], ["A", "B", "A"]),
        ([wp(None), wp("C")], ["C"]),
        ([wp("A"), wp("A"), wp("B"), wp("A"), wp("A")], ["A", "B", "A"]),
    ],
)
def test_accept_stream_traces(stream, expected):
    words, confs = accept_stream(stream)
    assert words == expected
    assert len(confs) == len(expected)


def test_accept_stream_keeps_first_confidence():
    words, confs = accept_stream([wp("A", 0.9), wp("A", 0.4), wp("B", 0.3)])
    assert words == ["A", "B"]
    assert confs == [0.9, 0.3]


# ---------------------------------------------------------------------------
# decode


def test_decode_all_below_threshold():
    model = scripted_model([dist(101, 1, 0.15)])
    words, confs, mean = decode(model, flat_sequence(60), DecodeConfig())
    assert words == [] and confs == [] and mean == 0.0


def test_decode_single_word_collapses():
    model = scripted_model([dist(5, 3, 0.9)])  # same confident row everywhere
    seq = flat_sequence(95)
    words, confs, mean = decode(model, seq, DecodeConfig())
    assert words == [3]
    npt.assert_allclose(mean, 0.9, rtol=1e-12)


def test_decode_mean_confidence():
    rows = [dist(101, 1, 0.6)] + [np.full(101, 1.0 / 101)] * 5 + [dist(101, 2, 0.5)] * 6
    model = scripted_model(rows)
    words, confs, mean = decode(model, flat_sequence(95), DecodeConfig())
    assert words == [1, 2]
    npt.assert_allclose(confs, [0.6, 0.5], rtol=1e-12)
    npt.assert_allclose(mean, 0.55, rtol=1e-12)


def test_decode_trace_structure_and_json(tmp_path):
    rows = [dist(101, 0, 0.7)] * 3 + [np.full(101, 1.0 / 101)] * 3 + [dist(101, 2, 0.8)] * 6
    model = scripted_model(rows)
    trace = decode_trace(model, flat_sequence(95), DecodeConfig())
    assert isinstance(trace, DecodeTrace)
    assert len(trace.predictions) == 12
    assert [p.start for p in trace.predictions] == list(range(0, 60, 5))
    assert list(trace.accepted_words) == [0, 2]
    nonnull = [p.word for p in trace.predictions if p.word is not None]
    # accepted words form a subsequence of the non-null stream
    it = iter(nonnull)
    assert all(w in it for w in trace.accepted_words)

    doc = trace_to_json(trace)
    assert set(doc) == {"windows", "accepted", "mean_confidence"}
    assert doc["windows"][0] == {"start": 0, "word": 0, "confidence": 0.7}
    assert doc["windows"][3]["word"] is None
    assert [a["word"] for a in doc["accepted"]] == [0, 2]

    path = tmp_path / "trace.json"
    save_trace(trace, path)
    assert json.loads(path.read_text()) == doc


def test_decode_trace_empty_mean():
    t = DecodeTrace((), [], [])
    assert t.mean_confidence == 0.0


def test_decode_deterministic():
    rows = [dist(6, i % 6, 0.5) for i in range(12)]
    seq = flat_sequence(95)
    r1 = decode(scripted_model(rows), seq, DecodeConfig())
    r2 = decode(scripted_model(rows), seq, DecodeConfig())
    assert r1 == r2
