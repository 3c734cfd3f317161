"""Synthetic tone audio: deterministic renderer, exact transcriber, WAV I/O.

The renderable alphabet has 16 symbols; symbol i is a pure sine at
(i + 2) * 125 Hz, amplitude 0.5, lasting 4 frames of 64 samples at 8 kHz
(2125 Hz for the final symbol, the space, still well under Nyquist). Each
125 Hz step is one DFT bin of a 64-sample frame, so a frame of symbol i
puts all its energy in bin i + 2 and transcription reduces to spectral
argmax. The transcriber inverts the renderer exactly, which is what lets
end-to-end speech output be scored objectively instead of by listeners.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np

from .errors import AlphabetError, FramingError

SAMPLE_RATE = 8000
FRAME = 64
FRAMES_PER_SYMBOL = 4
SYMBOL_SAMPLES = FRAME * FRAMES_PER_SYMBOL
ALPHABET = "0123456789abcde "
BIN_LO = 2
BIN_HI = 17  # inclusive; bin b <-> symbol b - BIN_LO
AMPLITUDE = 0.5
N_SPECTRUM_BINS = FRAME // 2 + 1  # rfft bins 0..32


@dataclass
class Waveform:
    """Mono audio at the fixed rate; samples clipped to [-1, 1]."""

    samples: np.ndarray
    rate: int = SAMPLE_RATE

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float32)
        if arr.ndim != 1:
            raise FramingError(f"waveform must be mono 1-D, got shape {arr.shape}")
        if arr.size % FRAME != 0:
            raise FramingError(f"waveform length {arr.size} is not a multiple of the {FRAME}-sample frame")
        if not np.isfinite(arr).all():
            raise FramingError("waveform contains non-finite samples")
        self.samples = np.clip(arr, -1.0, 1.0)

    @property
    def n_frames(self) -> int:
        return self.samples.size // FRAME

    def frames(self) -> np.ndarray:
        return self.samples.reshape(-1, FRAME)


def symbol_frequency(symbol: str) -> float:
    return (ALPHABET.index(symbol) + BIN_LO) * SAMPLE_RATE / FRAME


def render(text: str) -> Waveform:
    """Render text to audio: one 256-sample pure-tone block per symbol.

    Phase restarts at zero on every symbol boundary. Raises AlphabetError
    on any character outside the 16-symbol alphabet.
    """
    if not text:
        return Waveform(np.zeros(0, dtype=np.float32))
    bad = set(text) - set(ALPHABET)
    if bad:
        raise AlphabetError(f"unsupported characters {sorted(bad)!r}; alphabet is {ALPHABET!r}")
    n = np.arange(SYMBOL_SAMPLES)
    blocks = []
    for ch in text:
        f = symbol_frequency(ch)
        blocks.append(AMPLITUDE * np.sin(2.0 * np.pi * f * n / SAMPLE_RATE))
    return Waveform(np.concatenate(blocks).astype(np.float32))


def spectra(wave: Waveform) -> np.ndarray:
    """Per-frame log-magnitude spectrum, bins 0..32 of a 64-point DFT."""
    mags = np.abs(np.fft.rfft(wave.frames(), axis=1))
    return np.log(1e-6 + mags).astype(np.float32)


def oracle_transcribe(wave: Waveform) -> str:
    """Exact inverse of render(): spectral argmax + majority vote per block.

    Each frame votes for the symbol whose bin dominates bins 2..17; a frame
    with zero energy in that band votes for the space symbol. The block's
    symbol is the majority vote (ties: first symbol reached in alphabet
    order). Audio whose length is not a whole number of symbol blocks is a
    framing error.
    """
    if wave.samples.size % SYMBOL_SAMPLES != 0:
        raise FramingError(f"waveform length {wave.samples.size} is not a multiple of {SYMBOL_SAMPLES}")
    mags = np.abs(np.fft.rfft(wave.frames(), axis=1))
    band = mags[:, BIN_LO : BIN_HI + 1]
    votes = band.argmax(axis=1)
    silent = band.max(axis=1) <= 1e-9
    votes = np.where(silent, ALPHABET.index(" "), votes)
    out = []
    for block in votes.reshape(-1, FRAMES_PER_SYMBOL):
        counts = np.bincount(block, minlength=len(ALPHABET))
        out.append(ALPHABET[int(counts.argmax())])
    return "".join(out)


def write_wav(path, wave: Waveform) -> None:
    """16-bit PCM mono RIFF at the canonical 8 kHz rate."""
    pcm = np.round(np.clip(wave.samples, -1.0, 1.0) * 32767.0).astype("<i2")
    with wave_open(path, "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(wave.rate)
        wf.writeframes(pcm.tobytes())


def read_wav(path) -> Waveform:
    with wave_open(path, "rb") as wf:
        if wf.getnchannels() != 1 or wf.getsampwidth() != 2:
            raise FramingError("expected 16-bit mono PCM")
        rate = wf.getframerate()
        pcm = np.frombuffer(wf.readframes(wf.getnframes()), dtype="<i2")
    return Waveform(pcm.astype(np.float32) / 32767.0, rate=rate)


def wave_open(path, mode):
    return wave.open(str(path), mode)
