import cmath
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from isacslam.channel import (EvalCounter, beam_gain, gain_table, per_ue_se, steering_vector,
                              sum_se, sweep_codebook, synth_channel)
from isacslam.geometry import PathGeometry

angle = st.floats(-math.pi, math.pi)


def test_steering_vector_examples():
    assert np.allclose(steering_vector(1.234, 1), [1.0])
    assert np.allclose(steering_vector(math.pi / 2, 2), np.array([1, 1]) / math.sqrt(2))
    assert np.linalg.norm(steering_vector(0.3, 4)) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        steering_vector(0.0, 0)


def test_synth_channel_examples():
    assert np.all(synth_channel([], 4, 3) == 0) and synth_channel([], 4, 3).shape == (4, 3)
    p = PathGeometry(0.3, 0.7, 0.5, False)
    assert np.allclose(synth_channel([p], 1, 1), [[0.5]])
    a = synth_channel([(0.3, 0.7, 0.2), (0.3, 0.7, 0.9)], 8, 8)
    b = synth_channel([(0.3, 0.7, 1.1)], 8, 8)
    assert np.allclose(a, b)
    with pytest.raises(ValueError):
        synth_channel([(0.1, 0.1, float("inf"))], 2, 2)


def test_sweep_codebook_examples():
    cb = sweep_codebook(8, 16)
    assert np.allclose(cb.angles, np.arange(1, 9) * math.pi / 8)
    assert cb.resolution == pytest.approx(math.pi / 8) and len(cb) == 8
    assert np.allclose(sweep_codebook(1, 4).angles, [math.pi])
    assert np.allclose(np.linalg.norm(cb.vectors, axis=0), 1.0)


def test_beam_gain_examples():
    assert beam_gain(np.array([1.0]), np.array([[2.0]]), np.array([1.0])) == pytest.approx(4.0)
    assert beam_gain(np.ones(2), np.zeros((2, 3)), np.ones(3)) == 0.0
    H = synth_channel([(0.2, 1.0, 1.0)], 4, 4)
    w, f = steering_vector(0.2, 4), steering_vector(1.0, 4)
    assert beam_gain(w, (2 - 1j) * H, f) == pytest.approx(5 * beam_gain(w, H, f))
    with pytest.raises(ValueError):
        beam_gain(np.ones(3), H, f)


def test_sum_se_examples():
    one = [np.array([[1.0]])]
    assert sum_se(one, [(np.array([1.0]), np.array([1.0]))], 1.0) == pytest.approx(1.0)
    H = np.array([[1.0]])
    pairs = [(np.array([1.0]), np.array([1.0]))] * 2
    assert sum_se([H, H], pairs, 1.0) == pytest.approx(2 * math.log2(1.5))
    assert sum_se([np.zeros((2, 2))] * 2, [(np.ones(2), np.ones(2))] * 2, 1.0) == 0.0
    with pytest.raises(ValueError):
        sum_se(one, [(np.array([1.0]), np.array([1.0]))], 0.0)


def test_gain_table_counts_pairs():
    c = EvalCounter()
    g = gain_table(np.eye(4)[:, :3], np.ones((4, 5)), np.eye(5)[:, :2], c)
    assert g.shape == (3, 2) and c.count == 6


def _scene(seed, n_ue=3, n=8):
    r = np.random.default_rng(seed)
    chans = [synth_channel([tuple(x) for x in np.c_[r.uniform(0, math.pi, (3, 2)), r.uniform(0.1, 1, 3)]], n, n)
             for _ in range(n_ue)]
    pairs = [(steering_vector(r.uniform(0, math.pi), n), steering_vector(r.uniform(0, math.pi), n))
             for _ in range(n_ue)]
    return chans, pairs


@given(st.integers(0, 10_000), angle, st.integers(0, 2))
def test_se_invariant_to_beam_phase(seed, phase, j):
    chans, pairs = _scene(seed)
    rot = list(pairs)
    f, w = rot[j]
    rot[j] = (f * cmath.exp(1j * phase), w * cmath.exp(-2j * phase))
    assert sum_se(chans, rot, 1.0) == pytest.approx(sum_se(chans, pairs, 1.0), rel=1e-12, abs=1e-12)


@given(st.integers(0, 10_000), st.integers(0, 2))
def test_removing_interferer_never_hurts(seed, drop):
    chans, pairs = _scene(seed)
    full = per_ue_se(chans, pairs, 0.5)
    fewer = list(pairs)
    fewer[drop] = None
    part = per_ue_se(chans, fewer, 0.5)
    for j in range(3):
        if j != drop:
            assert part[j] >= full[j] - 1e-12


@given(st.lists(st.tuples(angle, angle, st.floats(0, 3)), min_size=1, max_size=4), st.floats(-3, 3))
def test_synth_channel_linear_in_gains(paths, c):
    scaled = [(a, d, c * g) for a, d, g in paths]
    assert np.allclose(synth_channel(scaled, 6, 5), c * synth_channel(paths, 6, 5), atol=1e-12)


@given(st.integers(0, 10_000))
def test_gain_operator_norm_bound(seed):
    r = np.random.default_rng(seed)
    H = r.normal(size=(5, 7)) + 1j * r.normal(size=(5, 7))
    w = r.normal(size=5) + 1j * r.normal(size=5)
    f = r.normal(size=7) + 1j * r.normal(size=7)
    bound = np.linalg.norm(H, 2) ** 2 * np.linalg.norm(w) ** 2 * np.linalg.norm(f) ** 2
    assert beam_gain(w, H, f) <= bound * (1 + 1e-12)
