"""Slaney-scale, area-normalized mel filterbank written directly in numpy.

Used to freeze reference entries for the Rust filterbank test.
"""
import numpy as np

SR, N_FFT, N_MELS, FMIN, FMAX = 22050, 1024, 80, 0.0, 11025.0


def hz_to_mel(f):
    f = np.asarray(f, dtype=np.float64)
    lin = f / (200.0 / 3)
    log = 15.0 + np.log(np.maximum(f, 1e-12) / 1000.0) / (np.log(6.4) / 27.0)
    return np.where(f >= 1000.0, log, lin)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    lin = m * (200.0 / 3)
    log = 1000.0 * np.exp((np.log(6.4) / 27.0) * (m - 15.0))
    return np.where(m >= 15.0, log, lin)


def filterbank():
    freqs = np.linspace(0, SR / 2, N_FFT // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(FMIN), hz_to_mel(FMAX), N_MELS + 2))
    fb = np.zeros((N_MELS, len(freqs)))
    for m in range(N_MELS):
        l, c, r = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - l) / (c - l)
        down = (r - freqs) / (r - c)
        fb[m] = np.maximum(0, np.minimum(up, down)) * 2.0 / (r - l)
    return fb


if __name__ == "__main__":
    fb = filterbank()
    for m, k in [(0, 1), (10, 33), (40, 108), (79, 500)]:
        print(m, k, repr(fb[m, k]))
