import numpy as np
import pytest

from cogesture.errors import ValidationError
from cogesture.motion.audio import envelope_from_word_spans, extract_audio_features, features_from_envelope


def test_silence_gives_zero_features():
    f = extract_audio_features(np.zeros(10), 10)
    assert f.frames.shape == (10, 2)
    assert not f.frames.any()


def test_impulse_onset_peaks_at_its_frame():
    x = np.zeros(10)
    x[5] = 1.0
    f = extract_audio_features(x, 10)
    assert int(np.argmax(f.onset)) == 5
    # hop 1: energy is x^2, onset the rectified difference
    np.testing.assert_array_equal(f.onset, [0, 0, 0, 0, 0, 1, 0, 0, 0, 0])


def test_sine_envelope_is_amplitude_over_root_two():
    sr, amp = 16000, 0.7
    t = np.arange(sr * 2) / sr
    x = amp * np.sin(2 * np.pi * 220 * t)
    f = extract_audio_features(x, 50)
    env = f.envelope[2:]
    assert np.all(np.abs(env - amp / np.sqrt(2)) < 0.05 * amp / np.sqrt(2))


def test_resampled_length_matches_target():
    f = extract_audio_features(np.random.default_rng(0).standard_normal(1000), 37)
    assert len(f) == 37


@pytest.mark.parametrize("bad", [np.array([]), np.array([1.0, np.inf])])
def test_invalid_waveforms(bad):
    with pytest.raises(ValidationError):
        extract_audio_features(bad, 4)


def test_envelope_from_spans_and_pooling():
    env = envelope_from_word_spans([(0, 4), (8, 16)], [1.0, 0.5], 16)
    assert env[4:8].sum() == 0
    np.testing.assert_allclose(env[:4], np.sin(np.pi * (np.arange(4) + 0.5) / 4) ** 2)
    f = features_from_envelope(env, 8)
    assert f.frames.shape == (2, 2)
    np.testing.assert_allclose(f.envelope, [env[:8].mean(), env[8:].mean()])
    np.testing.assert_allclose(f.onset, [env[:8].mean(), max(0.0, env[8:].mean() - env[:8].mean())])
