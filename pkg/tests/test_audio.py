"""Tone renderer / oracle transcriber round-trips and WAV serialization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from molespeech.audio import (
    ALPHABET,
    FRAME,
    SYMBOL_SAMPLES,
    Waveform,
    oracle_transcribe,
    read_wav,
    render,
    spectra,
    write_wav,
)
from molespeech.errors import AlphabetError, FramingError
from molespeech.prng import Prng

toy_text = st.text(alphabet=ALPHABET, min_size=1, max_size=12)


def random_strings(seed: int, n: int, lo: int = 3, hi: int = 12) -> list[str]:
    rng = Prng(seed)
    out = []
    for _ in range(n):
        length = int(rng.integers(lo, hi + 1))
        out.append("".join(ALPHABET[int(i)] for i in rng.integers(0, len(ALPHABET), size=length)))
    return out


class TestRender:
    def test_length_formula(self):
        assert render("01234").samples.size == 5 * SYMBOL_SAMPLES == 1280

    def test_tone_frequency_of_a(self):
        wave = render("a")
        mags = np.abs(np.fft.rfft(wave.samples))
        peak_bin = int(mags.argmax())
        assert peak_bin * 8000 / wave.samples.size == pytest.approx(1500.0)

    def test_unsupported_character(self):
        with pytest.raises(AlphabetError):
            render("3x7")

    def test_amplitude_bound(self):
        wave = render("0123456789abcde ")
        assert np.abs(wave.samples).max() <= 0.5 + 1e-6

    def test_spectra_shape(self):
        assert spectra(render("ab")).shape == (8, 33)


class TestOracle:
    def test_round_trip_single_symbols(self):
        for ch in ALPHABET:
            assert oracle_transcribe(render(ch)) == ch

    def test_round_trip_random_strings(self):
        for s in random_strings(2024, 100):
            assert oracle_transcribe(render(s)) == s

    def test_noise_robustness(self):
        rng = Prng(77)
        for s in random_strings(2025, 100):
            clean = render(s)
            noisy = Waveform(clean.samples + rng.normal(0.05, clean.samples.shape).astype(np.float32))
            assert oracle_transcribe(noisy) == s

    def test_all_zero_waveform_maps_to_spaces(self):
        assert oracle_transcribe(Waveform(np.zeros(3 * SYMBOL_SAMPLES, dtype=np.float32))) == "   "

    def test_bad_framing(self):
        with pytest.raises(FramingError):
            oracle_transcribe(Waveform(np.zeros(FRAME, dtype=np.float32)))

    @settings(max_examples=25)
    @given(toy_text)
    def test_round_trip_property(self, s):
        assert oracle_transcribe(render(s)) == s


class TestWaveform:
    def test_rejects_bad_length(self):
        with pytest.raises(FramingError):
            Waveform(np.zeros(63, dtype=np.float32))

    def test_rejects_non_finite(self):
        with pytest.raises(FramingError):
            Waveform(np.full(64, np.nan, dtype=np.float32))

    def test_clipping(self):
        w = Waveform(np.full(64, 2.0, dtype=np.float32))
        assert w.samples.max() == 1.0


class TestWav:
    def test_round_trip_preserves_transcription(self, tmp_path):
        for s in random_strings(31, 10):
            path = tmp_path / "t.wav"
            write_wav(path, render(s))
            assert oracle_transcribe(read_wav(path)) == s

    def test_riff_header(self, tmp_path):
        path = tmp_path / "t.wav"
        write_wav(path, render("7"))
        blob = path.read_bytes()
        assert blob[:4] == b"RIFF" and blob[8:12] == b"WAVE"
        assert int.from_bytes(blob[24:28], "little") == 8000
