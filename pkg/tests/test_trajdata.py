import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scenerouter.errors import EmptyDataset, InvalidWindowParams, ParseError
from scenerouter.trajdata import (
    AugmentParams,
    RawRecord,
    augment,
    parse_dataset,
    read_windows_csv,
    window_segments,
    write_trajectory_file,
    write_windows_csv,
)

from conftest import random_window


def _records(agents, frames, gaps=()):
    return [RawRecord(f, a, float(f), float(a)) for a in agents for f in frames if (a, f) not in gaps]


def test_parse_two_lines(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text("0 1 0.0 0.0\n1 1 1.0 0.0\n")
    recs = parse_dataset(p)
    assert [(r.frame_id, r.agent_id, r.position) for r in recs] == [(0, 1, (0.0, 0.0)), (1, 1, (1.0, 0.0))]


def test_parse_sorts_and_skips_comments(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text("# header\n3 2 1 1\n\n1 5 0 0  # trailing\n1 2 4 4 extra\n")
    recs = parse_dataset(p)
    assert [(r.frame_id, r.agent_id) for r in recs] == [(1, 2), (1, 5), (3, 2)]


def test_parse_empty(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text("")
    with pytest.raises(EmptyDataset):
        parse_dataset(p)


def test_parse_bad_line(tmp_path):
    p = tmp_path / "b.txt"
    p.write_text("0 1 a b\n")
    with pytest.raises(ParseError) as exc:
        parse_dataset(p)
    assert exc.value.line == 1


def test_parse_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        parse_dataset(tmp_path / "nope.txt")


def test_single_full_span():
    wins = window_segments(_records([1], range(12)), 8, 4, 1)
    assert len(wins) == 1
    assert wins[0].segments[0].observed.shape == (8, 2)


def test_gap_excludes_agent():
    recs = _records([1, 2], range(12), gaps={(1, 5)})
    wins = window_segments(recs, 8, 4, 1)
    assert len(wins) == 1
    assert wins[0].agent_ids == [2]


def test_stride_enumeration_oracle():
    recs = _records([1, 2], range(20))
    wins = window_segments(recs, 8, 4, 4)
    starts = [s for s in range(0, 20) if s % 4 == 0 and s + 12 <= 20]
    assert [w.frame_start for w in wins] == starts == [0, 4, 8]
    assert all(len(w.segments) == 2 for w in wins)


@pytest.mark.parametrize("t_obs,t_pred,stride", [(2, 4, 1), (8, 0, 1), (8, 4, 0)])
def test_invalid_window_params(t_obs, t_pred, stride):
    with pytest.raises(InvalidWindowParams):
        window_segments(_records([1], range(20)), t_obs, t_pred, stride)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(3, 6), st.integers(1, 4), st.integers(1, 3))
def test_continuity_rule_matches_brute_force(seed, t_obs, t_pred, stride):
    rng = np.random.default_rng(seed)
    frames = range(25)
    gaps = {(a, f) for a in range(4) for f in frames if rng.random() < 0.08}
    recs = _records(range(4), frames, gaps)
    wins = window_segments(recs, t_obs, t_pred, stride)
    have = {(r.agent_id, r.frame_id) for r in recs}
    length = t_obs + t_pred
    expected = []
    for start in range(0, 25 - length + 1, stride):
        agents = [a for a in range(4) if all((a, f) in have for f in range(start, start + length))]
        if agents:
            expected.append((start, agents))
    assert [(w.frame_start, w.agent_ids) for w in wins] == expected
    # Windowing is deterministic.
    again = window_segments(recs, t_obs, t_pred, stride)
    assert [(w.frame_start, w.agent_ids) for w in again] == expected


def test_identity_augment_is_exact():
    w = random_window(np.random.default_rng(0), 3, 6)
    out = augment(w, AugmentParams())
    for a, b in zip(w.segments, out.segments):
        assert np.array_equal(a.observed, b.observed) and np.array_equal(a.future, b.future)


def test_rotation_pi():
    w = random_window(np.random.default_rng(0), 1, 3)
    seg = w.segments[0]
    from dataclasses import replace

    from scenerouter.trajdata import SceneWindow

    w = SceneWindow(0, (replace(seg, observed=[[1.0, 0.0]] * 3, future=[[1.0, 0.0]]),))
    out = augment(w, AugmentParams(rotation=math.pi))
    assert np.allclose(out.segments[0].observed, [[-1.0, 0.0]] * 3, atol=1e-12, rtol=0)


def test_composed_transform_oracle():
    from conftest import make_window

    w = make_window([[[2.0, 1.0]] * 4], 3)
    p = AugmentParams(scale=2.0, rotation=math.pi / 2, translation=(3.0, 0.0), pivot=(1.0, 1.0))
    # Hand composition: p - pivot = (1, 0); rotate 90 deg -> (0, 1); scale -> (0, 2);
    # + pivot -> (1, 3); + translation -> (4, 3).
    out = augment(w, p)
    assert np.allclose(out.segments[0].observed, [[4.0, 3.0]] * 3, atol=1e-12, rtol=0)
    assert out.segments[0].agent_id == 0 and out.frame_start == w.frame_start


@settings(max_examples=100, deadline=None)
@given(
    st.integers(0, 2**32 - 1),
    st.floats(0.1, 10.0),
    st.floats(-10.0, 10.0),
    st.tuples(st.floats(-50, 50), st.floats(-50, 50)),
    st.tuples(st.floats(-50, 50), st.floats(-50, 50)),
)
def test_inverse_roundtrip(seed, scale, rot, shift, pivot):
    w = random_window(np.random.default_rng(seed))
    p = AugmentParams(scale=scale, rotation=rot, translation=shift, pivot=pivot)
    back = augment(augment(w, p), p.inverse())
    for a, b in zip(w.segments, back.segments):
        assert np.allclose(a.observed, b.observed, atol=1e-9, rtol=0)
        assert np.allclose(a.future, b.future, atol=1e-9, rtol=0)


def test_augment_params_validation():
    with pytest.raises(ValueError):
        AugmentParams(scale=0.0)
    with pytest.raises(ValueError):
        AugmentParams(rotation=float("inf"))


def test_window_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    wins = [random_window(rng, 3, 5, 4) for _ in range(4)]
    wins = [type(w)(i, w.segments) for i, w in enumerate(wins)]
    write_windows_csv(wins, tmp_path / "w.csv")
    back = read_windows_csv(tmp_path / "w.csv", 5, 4)
    assert len(back) == 4
    for a, b in zip(wins, back):
        assert a.window_id == b.window_id and a.agent_ids == b.agent_ids
        assert np.array_equal(a.observed_array(), b.observed_array())
        assert np.array_equal(a.future_array(), b.future_array())


def test_trajectory_file_rewindows_losslessly(tmp_path):
    from scenerouter.eval.synth import synth_benchmark

    bench = synth_benchmark(seed=1, n_per_regime=3)
    write_trajectory_file(bench.windows, tmp_path / "t.txt")
    wins = window_segments(parse_dataset(tmp_path / "t.txt"), 8, 12, 20)
    assert len(wins) == len(bench.windows)
    for a, b in zip(bench.windows, wins):
        assert a.agent_ids == b.agent_ids
        assert np.array_equal(a.future_array(), b.future_array())
