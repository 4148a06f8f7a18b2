import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.ndimage import gaussian_filter

from soundingvideo import audio
from soundingvideo.config import MelConfig

MEL = MelConfig()


def sine_wave(freq, seconds=1.0, sr=16000, amp=1.0):
    t = np.arange(int(seconds * sr)) / sr
    return audio.AudioWave(samples=amp * np.sin(2 * np.pi * freq * t), sample_rate=sr)


class TestMelForward:
    def test_silence_maps_to_floor(self):
        spec = audio.mel_forward(audio.AudioWave(np.zeros(16000), 16000), MEL)
        assert spec.values.min() == 0.0 and spec.values.max() == 0.0

    def test_sine_argmax_matches_closed_form_band(self):
        # oracle: the band is computed from mel-scale edge arithmetic alone
        spec = audio.mel_forward(sine_wave(440.0), MEL)
        band = audio.dominant_band_for_frequency(MEL, 440.0)
        assert np.all(spec.values.argmax(axis=0) == band)

    def test_frame_count_formula(self):
        spec = audio.mel_forward(audio.AudioWave(np.zeros(16000), 16000), MEL)
        assert spec.frames == 1 + (16000 - 1024) // 256 == 59
        assert audio.frame_count(16000, MEL) == 59

    def test_too_short_wave_rejected(self):
        with pytest.raises(audio.AudioCodecError):
            audio.mel_forward(audio.AudioWave(np.zeros(512), 16000), MEL)

    def test_non_finite_samples_rejected(self):
        bad = np.zeros(4096)
        bad[7] = np.nan
        with pytest.raises(audio.AudioCodecError):
            audio.AudioWave(bad, 16000)

    def test_values_in_unit_interval(self):
        rng = np.random.default_rng(1)
        wave = audio.AudioWave(rng.uniform(-1, 1, 8192), 16000)
        spec = audio.mel_forward(wave, MEL)
        assert spec.values.min() >= 0.0 and spec.values.max() <= 1.0

    def test_shift_covariance_at_hop_granularity(self):
        rng = np.random.default_rng(2)
        base = rng.uniform(-0.5, 0.5, 8192)
        delayed = np.concatenate([np.zeros(MEL.hop), base])
        s0 = audio.mel_forward(audio.AudioWave(base, 16000), MEL)
        s1 = audio.mel_forward(audio.AudioWave(delayed, 16000), MEL)
        # column k of the delayed signal equals column k-1 of the original
        np.testing.assert_allclose(s1.values[:, 1:s0.frames + 1], s0.values, atol=1e-12)


class TestAudioImage:
    def test_constant_spectrogram_resizes_to_constant(self):
        spec = audio.MelSpectrogram(np.full((80, 59), 0.5))
        img = audio.spectrogram_to_audio_image(spec, 64, 64)
        np.testing.assert_allclose(img.pixels, 0.5, atol=1e-12)

    def test_canvas_shape(self):
        spec = audio.MelSpectrogram(np.random.default_rng(0).random((80, 59)))
        img = audio.spectrogram_to_audio_image(spec, 256, 256)
        assert img.pixels.shape == (3, 256, 256)
        assert img.source_shape == (80, 59)

    def test_identity_at_matching_size(self):
        values = np.random.default_rng(0).random((256, 256))
        spec = audio.MelSpectrogram(values)
        img = audio.spectrogram_to_audio_image(spec, 256, 256)
        np.testing.assert_array_equal(img.pixels[0], values)
        back = audio.audio_image_to_spectrogram(img, 256, 256)
        np.testing.assert_array_equal(back.values, values)

    def test_channels_identical(self):
        spec = audio.MelSpectrogram(np.random.default_rng(3).random((80, 59)))
        img = audio.spectrogram_to_audio_image(spec, 128, 128)
        assert np.abs(img.pixels[0] - img.pixels[1]).max() == 0.0
        assert np.abs(img.pixels[0] - img.pixels[2]).max() == 0.0

    def test_constant_image_inverts_to_constant(self):
        img = audio.AudioImage(np.full((3, 64, 64), 0.25), source_shape=(80, 59))
        spec = audio.audio_image_to_spectrogram(img, 80, 59)
        np.testing.assert_allclose(spec.values, 0.25, atol=1e-12)

    def test_round_trip_psnr_on_smooth_corpus(self):
        # seeded corpus of band-limited smooth spectrograms, 256^2 canvas
        rng = np.random.default_rng(1234)
        worst = np.inf
        for _ in range(8):
            raw = gaussian_filter(rng.random((80, 59)), sigma=3.0)
            raw = (raw - raw.min()) / (raw.max() - raw.min())
            spec = audio.MelSpectrogram(raw)
            img = audio.spectrogram_to_audio_image(spec, 256, 256)
            back = audio.audio_image_to_spectrogram(img, 80, 59)
            mse = float(np.mean((back.values - raw) ** 2))
            worst = min(worst, 10 * np.log10(1.0 / max(mse, 1e-12)))
        assert worst > 30.0, f"worst corpus PSNR {worst:.1f} dB"


class TestGriffinLim:
    def test_all_floor_is_near_silence(self):
        spec = audio.MelSpectrogram(np.zeros((80, 59)))
        wave = audio.spectrogram_to_wave(spec, MEL, iterations=5, seed=0)
        assert np.abs(wave.samples).max() < 1e-3

    def test_sine_dominant_frequency_within_one_band(self):
        spec = audio.mel_forward(sine_wave(440.0, amp=0.8), MEL)
        rec = audio.spectrogram_to_wave(spec, MEL, iterations=60, seed=0)
        mag = np.abs(np.fft.rfft(rec.samples))
        peak = np.fft.rfftfreq(len(rec.samples), 1.0 / 16000)[mag.argmax()]
        got = audio.dominant_band_for_frequency(MEL, peak)
        want = audio.dominant_band_for_frequency(MEL, 440.0)
        assert abs(got - want) <= 1

    def test_deterministic_given_seed(self):
        spec = audio.mel_forward(sine_wave(880.0, seconds=0.25), MEL)
        a = audio.spectrogram_to_wave(spec, MEL, iterations=10, seed=7)
        b = audio.spectrogram_to_wave(spec, MEL, iterations=10, seed=7)
        np.testing.assert_array_equal(a.samples, b.samples)

    def test_iterations_validated(self):
        spec = audio.MelSpectrogram(np.zeros((80, 10)))
        with pytest.raises(audio.AudioCodecError):
            audio.spectrogram_to_wave(spec, MEL, iterations=0)


class TestInvariants:
    @given(st.lists(st.floats(min_value=-0.5, max_value=1.5), min_size=4, max_size=64))
    @settings(max_examples=50, deadline=None)
    def test_normalization_idempotent(self, values):
        arr = np.asarray(values).reshape(1, -1)
        once = audio.normalize_unit(arr)
        np.testing.assert_array_equal(audio.normalize_unit(once), once)

    @given(st.integers(min_value=2, max_value=40), st.integers(min_value=2, max_value=40))
    @settings(max_examples=25, deadline=None)
    def test_resize_identity_when_sizes_match(self, h, w):
        values = np.random.default_rng(h * 100 + w).random((h, w))
        np.testing.assert_array_equal(audio.resize_bilinear(values, h, w), values)

    def test_resize_preserves_value_range(self):
        values = np.random.default_rng(5).random((30, 20))
        out = audio.resize_bilinear(values, 70, 45)
        assert out.min() >= values.min() - 1e-12
        assert out.max() <= values.max() + 1e-12


class TestWavIO:
    def test_pcm16_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        wave = audio.AudioWave(rng.uniform(-0.9, 0.9, 4000), 16000)
        audio.save_wav(tmp_path / "x.wav", wave)
        back = audio.load_wav(tmp_path / "x.wav")
        assert back.sample_rate == 16000
        np.testing.assert_allclose(back.samples, wave.samples, atol=1.0 / 32767)
