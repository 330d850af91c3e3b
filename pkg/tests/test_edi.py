import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evrf.edi import edi_deblur, export_frames, load_frame_manifest
from evrf.events import Event, EventStream, split_by_count, split_by_time
from evrf.sim import FrameSequence, SimConfig, log_luminance, luminance, simulate_events, synthesize_blur


def random_binset(rng, h=5, w=6, n=80, b=4, t_end=8000):
    t = np.sort(rng.integers(1, t_end + 1, n))
    s = EventStream(rng.integers(0, w, n), rng.integers(0, h, n), t, rng.choice([-1, 1], n), 0, t_end, w, h)
    return split_by_count(s, b)


def test_no_events_frames_equal_blur(rng):
    blur = rng.uniform(0, 1, (4, 5, 3))
    res = edi_deblur(blur, split_by_time(EventStream.empty(0, 100, 5, 4), 4), 0.25)
    assert res.frames.shape == (5, 4, 5, 3)
    for f in res.frames:
        np.testing.assert_allclose(f, blur, rtol=1e-15)


def test_single_pixel_closed_form():
    s = EventStream.from_events([Event(0, 0, 3, 1), Event(0, 0, 6, 1)], 0, 10, 1, 1)
    bs = split_by_time(s, 1)
    assert bs.weights.tolist() == [0.5, 0.5]
    res = edi_deblur(np.array([[0.6]]), bs, 0.25)
    i0 = 0.6 / (0.5 + 0.5 * math.exp(0.5))
    assert res.frames[0, 0, 0] == pytest.approx(i0, rel=1e-14)
    assert res.frames[1, 0, 0] == pytest.approx(i0 * math.exp(0.5), rel=1e-14)


def test_exact_reblur_identity(rng):
    for _ in range(20):
        bs = random_binset(rng, b=int(rng.integers(1, 9)))
        blur = rng.uniform(0, 1, (5, 6, 3))
        res = edi_deblur(blur, bs, float(rng.uniform(0.1, 0.5)))
        reblur = np.tensordot(res.weights, res.frames, axes=1)
        assert np.max(np.abs(reblur - blur)) <= 1e-10


def test_degenerate_zero_weight_frame_still_emitted():
    # all events at t_end put every interior split there, so the last weights vanish
    s = EventStream.from_events([Event(0, 0, 10, 1)] * 4, 0, 10, 1, 1)
    bs = split_by_count(s, 4)
    res = edi_deblur(np.array([[0.5]]), bs, 0.25)
    assert len(res.frames) == 5
    assert np.all(np.isfinite(res.frames))
    np.testing.assert_allclose(np.tensordot(res.weights, res.frames, axes=1), [[0.5]], atol=1e-12)


def test_grayscale_and_color_channels_share_counts(rng):
    bs = random_binset(rng)
    gray = rng.uniform(0.1, 1, (5, 6))
    res_g = edi_deblur(gray, bs, 0.25)
    res_c = edi_deblur(np.stack([gray, 2 * gray, gray], -1), bs, 0.25)
    np.testing.assert_allclose(res_c.frames[..., 0], res_g.frames, rtol=1e-14)
    np.testing.assert_allclose(res_c.frames[..., 1], 2 * res_g.frames, rtol=1e-14)


def test_rejects_bad_input(rng):
    bs = random_binset(rng)
    with pytest.raises(ValueError):
        edi_deblur(np.zeros((3, 3)), bs, 0.25)
    with pytest.raises(ValueError):
        edi_deblur(np.zeros((5, 6)), bs, 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10.0))
def test_scale_equivariance(seed, c):
    rng = np.random.default_rng(seed)
    bs = random_binset(rng)
    blur = rng.uniform(0, 1, (5, 6))
    a = edi_deblur(blur, bs, 0.25).frames
    b = edi_deblur(c * blur, bs, 0.25).frames
    np.testing.assert_allclose(b, c * a, rtol=1e-12)


def test_monotone_with_positive_counts():
    evs = [Event(0, 0, t, 1) for t in (1, 2, 4, 5, 7, 9)]
    res = edi_deblur(np.array([[0.5]]), split_by_count(EventStream.from_events(evs, 0, 10, 1, 1), 3), 0.3)
    assert np.all(np.diff(res.frames[:, 0, 0]) >= 0)


def test_simulator_round_trip_log_error_within_threshold():
    rng = np.random.default_rng(5)
    h, w, n, theta = 16, 16, 9, 0.25
    yy, xx = np.mgrid[0:h, 0:w]
    frames = []
    for j in range(n):  # bright blob sliding across a textured background
        shift = 0.6 * j
        blob = np.exp(-(((xx - 4 - shift) ** 2 + (yy - 8) ** 2) / 6.0))
        frames.append(np.clip(0.15 + 0.05 * np.sin(xx + yy) + 0.8 * blob, 0, None))
    frames = np.repeat(np.stack(frames)[..., None], 3, -1)
    seq = FrameSequence(frames, np.arange(n) * 1000)
    stream = simulate_events(seq, SimConfig(theta, theta))
    bs = split_by_time(stream, n - 1)  # split times coincide with the frame times
    res = edi_deblur(synthesize_blur(seq), bs, theta)
    err = np.abs(log_luminance(res.frames) - log_luminance(frames))
    assert err.mean() <= theta
    assert np.any(bs.counts != 0)


def test_export_frames_and_manifest(tmp_path, rng):
    bs = random_binset(rng)
    res = edi_deblur(rng.uniform(0, 1, (5, 6, 3)), bs, 0.25)
    out = tmp_path / "new" / "dir"
    paths = export_frames(res, out)
    assert out.is_dir()
    assert sorted(p.name for p in paths) == [f"frame_{k:03d}.png" for k in range(5)] + ["manifest.json"]
    entries = load_frame_manifest(out / "manifest.json")
    assert [e["t_us"] for e in entries] == res.split_times.tolist()
    assert [e["weight"] for e in entries] == res.weights.tolist()
    again = json.loads(json.dumps({"frames": entries}))
    assert again["frames"] == entries


def test_export_reports_path_on_failure(tmp_path, rng):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    res = edi_deblur(rng.uniform(0, 1, (5, 6)), random_binset(rng), 0.25)
    with pytest.raises(OSError, match="file"):
        export_frames(res, blocker / "sub")
