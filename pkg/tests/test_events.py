import logging
import struct
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import brute_force_count_partition, random_stream, reference_simulate
from evrf.events import (Event, EventFormatError, EventStream, read_events, read_events_csv, signed_counts,
                         spatial_mask, split_by_count, split_by_time, time_weights, write_events,
                         write_events_csv)
from evrf.sim import FrameSequence, SimConfig, simulate_events


def stream_from_times(times, t_start, t_end, width=4, height=4):
    return EventStream.from_events([Event(0, 0, t, 1) for t in times], t_start, t_end, width, height)


@st.composite
def streams(draw, max_events=60):
    n = draw(st.integers(0, max_events))
    t_end = draw(st.integers(1, 5000))
    ts = sorted(draw(st.lists(st.integers(0, t_end), min_size=n, max_size=n)))
    xs = draw(st.lists(st.integers(0, 7), min_size=n, max_size=n))
    ys = draw(st.lists(st.integers(0, 5), min_size=n, max_size=n))
    ps = draw(st.lists(st.sampled_from([-1, 1]), min_size=n, max_size=n))
    return EventStream(xs, ys, ts, ps, 0, t_end, 8, 6)


# ----------------------------------------------------------------- split_by_time

def test_time_split_uniform_stream():
    bs = split_by_time(stream_from_times(range(1, 9), 0, 8), 4)
    assert bs.sizes.tolist() == [2, 2, 2, 2]
    assert bs.split_times.tolist() == [0, 2, 4, 6, 8]


def test_time_split_empty_stream():
    bs = split_by_time(EventStream.empty(0, 8, 4, 4), 4)
    assert bs.b == 4
    assert bs.sizes.tolist() == [0, 0, 0, 0]
    assert bs.split_times.tolist() == [0, 2, 4, 6, 8]


def test_time_split_clustered_first_quarter():
    times = [100, 150, 400, 1000, 1999, 2000]  # exposure [0, 8000], first quarter is (0, 2000]
    bs = split_by_time(stream_from_times(times, 0, 8000), 4)
    assert bs.sizes.tolist() == [6, 0, 0, 0]


def test_time_split_boundary_ties_go_to_earlier_bin():
    bs = split_by_time(stream_from_times([0, 2, 2, 3, 4], 0, 8), 4)
    # t=0 joins the first bin; both t=2 events close bin 1
    assert bs.sizes.tolist() == [3, 2, 0, 0]


def test_split_rejects_nonpositive_b():
    s = stream_from_times([1, 2], 0, 8)
    for fn in (split_by_time, split_by_count):
        with pytest.raises(ValueError):
            fn(s, 0)


# ----------------------------------------------------------------- split_by_count

def test_count_split_divisible():
    assert split_by_count(stream_from_times(range(1, 9), 0, 8), 4).sizes.tolist() == [2, 2, 2, 2]


def test_count_split_seven_events():
    bs = split_by_count(stream_from_times(range(1, 8), 0, 8), 4)
    assert bs.sizes.tolist() == [1, 2, 2, 2]
    labels = np.repeat(np.arange(4), bs.sizes)
    assert labels.tolist() == brute_force_count_partition(7, 4)


def test_count_split_times_are_last_event_of_each_bin():
    times = [1, 3, 4, 9, 10, 15, 20, 30]
    bs = split_by_count(stream_from_times(times, 0, 40), 4)
    assert bs.split_times.tolist() == [0, 3, 9, 15, 40]


def test_count_split_concentrates_on_dense_motion():
    # 90% of the events in the first fifth of the exposure
    rng = np.random.default_rng(0)
    times = np.sort(np.concatenate([rng.integers(1, 2000, 900), rng.integers(2000, 10_001, 100)]))
    s = stream_from_times(times, 0, 10_000)
    by_count = split_by_count(s, 4).split_times
    by_time = split_by_time(s, 4).split_times
    assert np.all(by_count[1:-1] < by_time[1:-1])
    assert np.all(by_count[1:-1] < 2000)


def test_count_split_sparse_falls_back_to_time(caplog):
    s = stream_from_times([1, 5], 0, 8)
    with caplog.at_level(logging.WARNING):
        bs = split_by_count(s, 4)
    assert "splitting by time" in caplog.text
    ref = split_by_time(s, 4)
    assert np.array_equal(bs.index_bounds, ref.index_bounds)
    assert np.array_equal(bs.split_times, ref.split_times)


def test_count_split_matches_brute_force_partition(rng):
    for _ in range(200):
        s = int(rng.integers(0, 60))
        b = int(rng.integers(1, 9))
        if s < b:
            continue
        bs = split_by_count(random_stream(rng, s), b)
        assert np.repeat(np.arange(b), bs.sizes).tolist() == brute_force_count_partition(s, b)


# ----------------------------------------------------------------- time weights

def test_weights_uniform_b4():
    w = time_weights([0, 2, 4, 6, 8])
    assert w.tolist() == [1 / 8, 1 / 4, 1 / 4, 1 / 4, 1 / 8]


def test_weights_b1():
    assert time_weights([0, 10]).tolist() == [0.5, 0.5]


def test_weights_nonuniform():
    np.testing.assert_allclose(time_weights([0, 0.25, 1.0]), [0.125, 0.5, 0.375], atol=1e-15)


def test_weights_exact_rationals():
    # oracle: exact rational trapezoid computation
    ts = [0, 3, 7, 8, 20]
    texp = Fraction(ts[-1] - ts[0])
    padded = [ts[0]] + ts + [ts[-1]]
    expected = [Fraction(padded[k + 2] - padded[k]) / (2 * texp) for k in range(len(ts))]
    np.testing.assert_allclose(time_weights(ts), [float(e) for e in expected], rtol=0, atol=1e-15)


def test_weights_integrate_piecewise_linear_signal(rng):
    # Σ W_k f(t_k) · t_exp is the trapezoid integral of the linear interpolant
    for _ in range(50):
        t = np.sort(rng.uniform(0, 100, 6))
        f = rng.normal(size=6)
        np.testing.assert_allclose(np.sum(time_weights(t) * f) * (t[-1] - t[0]), np.trapezoid(f, t), rtol=1e-12)


def test_weights_reject_zero_exposure():
    with pytest.raises(ValueError):
        time_weights([5, 5, 5])


@given(st.lists(st.floats(0, 1e6, allow_nan=False), min_size=2, max_size=20))
def test_weights_normalized(ts):
    ts = sorted(ts)
    if ts[-1] - ts[0] <= 1e-6:
        return
    w = time_weights(ts)
    assert abs(w.sum() - 1.0) <= 1e-12
    assert np.all(w >= 0)


# ----------------------------------------------------------------- signed counts and mask

def test_signed_counts_mixed_polarity():
    s = EventStream.from_events([Event(1, 2, 1, 1), Event(1, 2, 2, 1), Event(1, 2, 3, -1)], 0, 4, 4, 4)
    c = signed_counts(split_by_time(s, 1))
    assert c.shape == (1, 4, 4)
    assert c[0, 2, 1] == 1
    assert np.count_nonzero(c) == 1


def test_signed_counts_zero_without_events():
    c = signed_counts(split_by_time(EventStream.empty(0, 8, 5, 3), 2))
    assert c.shape == (2, 3, 5) and not c.any()


def ramp_sequence(n=5, h=4, w=6):
    # per-pixel brightness ramps with different slopes, some darkening
    base = np.linspace(0.1, 0.9, h * w).reshape(h, w)
    slope = np.linspace(-0.1513, 0.3071, h * w).reshape(h, w)
    frames = np.stack([np.clip(base * np.exp(slope * j * 2), 0.01, 5) for j in range(n)])
    return FrameSequence(np.repeat(frames[..., None], 3, -1), np.arange(n) * 1000)


def test_signed_counts_match_simulator_tally():
    seq = ramp_sequence()
    stream = simulate_events(seq, SimConfig(0.2, 0.2))
    _, tally = reference_simulate(seq.frames, seq.timestamps, 0.2, 0.2)
    # time bins aligned with the frame gaps
    c = signed_counts(split_by_time(stream, len(seq) - 1))
    assert np.array_equal(c, tally)
    assert np.abs(tally).sum() > 20


def test_mask_empty_stream_all_sharp():
    m = spatial_mask(split_by_time(EventStream.empty(0, 8, 5, 4), 4))
    assert not m.blur.any()
    assert len(m.sharp_pixels) == 20


def test_mask_single_event():
    s = EventStream.from_events([Event(3, 7, 5, -1)], 0, 8, 10, 10)
    assert spatial_mask(split_by_count(s, 1)).blur_pixels == {(3, 7)}


def test_mask_moving_edge_matches_luminance_change():
    h, w = 8, 12
    f0 = np.full((h, w), 0.2)
    f0[:, :5] = 0.8
    f1 = np.full((h, w), 0.2)
    f1[:, :8] = 0.8
    f1[0, 9] = 0.22  # small change below threshold
    seq = FrameSequence(np.stack([f0, f1])[..., None].repeat(3, -1), [0, 1000])
    theta = 0.25
    mask = spatial_mask(split_by_count(simulate_events(seq, SimConfig(theta, theta)), 4))
    changed = np.abs(np.log(f1) - np.log(f0)) >= theta
    assert np.array_equal(mask.blur, changed)


@settings(max_examples=60, deadline=None)
@given(streams(), st.integers(1, 8))
def test_partition_both_modes(s, b):
    original = Counter(map(tuple, s))
    for fn in (split_by_time, split_by_count):
        bs = fn(s, b)
        assert bs.b == b
        merged = Counter(e for bin_ in bs.bins for e in map(tuple, bin_))
        assert merged == original


@settings(max_examples=60, deadline=None)
@given(streams(), st.integers(1, 8))
def test_count_balance(s, b):
    if len(s) < b:
        return
    sizes = split_by_count(s, b).sizes
    assert sizes.max() - sizes.min() <= 1
    if len(s) % b == 0:
        assert np.all(sizes == len(s) // b)


@settings(max_examples=60, deadline=None)
@given(streams(), st.integers(1, 6))
def test_mask_complement_and_refinement(s, b):
    m = spatial_mask(split_by_count(s, b))
    assert m.blur_pixels | m.sharp_pixels == {(x, y) for x in range(8) for y in range(6)}
    assert not (m.blur_pixels & m.sharp_pixels)
    finer = spatial_mask(split_by_count(s, 2 * b))
    assert np.all(finer.blur >= m.blur)


@settings(max_examples=40, deadline=None)
@given(streams(), st.integers(1, 6))
def test_split_times_monotone_and_bounded(s, b):
    for fn in (split_by_time, split_by_count):
        t = fn(s, b).split_times
        assert t[0] == s.t_start and t[-1] == s.t_end
        assert np.all(np.diff(t) >= 0)


# ----------------------------------------------------------------- stream validation and file format

def test_stream_validation():
    with pytest.raises(ValueError):
        EventStream([0, 0], [0, 0], [5, 3], [1, 1], 0, 10, 4, 4)  # unsorted
    with pytest.raises(ValueError):
        EventStream([4], [0], [1], [1], 0, 10, 4, 4)  # x out of range
    with pytest.raises(ValueError):
        EventStream([0], [0], [1], [0], 0, 10, 4, 4)  # polarity
    with pytest.raises(ValueError):
        EventStream([0], [0], [11], [1], 0, 10, 4, 4)  # outside exposure


def test_binary_round_trip(tmp_path, rng):
    s = random_stream(rng, 500)
    write_events(tmp_path / "a.evt", s)
    back = read_events(tmp_path / "a.evt", s.t_start, s.t_end)
    assert back == s
    raw = (tmp_path / "a.evt").read_bytes()
    assert len(raw) == 24 + 16 * 500
    magic, version, w, h, n = struct.unpack_from("<4sIIIQ", raw)
    assert (magic, version, w, h, n) == (b"EVRF", 1, 16, 12, 500)
    x, y, t, p = struct.unpack_from("<IIIi", raw, 24)
    assert (x, y, t, p) == (s.x[0], s.y[0], s.t[0], s.p[0])


def test_binary_default_bounds_are_event_span(tmp_path):
    s = stream_from_times([3, 5, 9], 0, 20)
    write_events(tmp_path / "a.evt", s)
    back = read_events(tmp_path / "a.evt")
    assert (back.t_start, back.t_end) == (3, 9)


def test_csv_round_trip(tmp_path, rng):
    s = random_stream(rng, 50)
    write_events_csv(tmp_path / "a.csv", s)
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "x,y,t_us,p"
    assert read_events_csv(tmp_path / "a.csv", 16, 12, s.t_start, s.t_end) == s


def test_bad_magic_names_file(tmp_path, rng):
    path = tmp_path / "broken.evt"
    write_events(path, random_stream(rng, 5))
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(EventFormatError, match="broken.evt"):
        read_events(path)


def test_truncated_file_rejected(tmp_path, rng):
    path = tmp_path / "short.evt"
    write_events(path, random_stream(rng, 5))
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(EventFormatError, match="short.evt"):
        read_events(path)
