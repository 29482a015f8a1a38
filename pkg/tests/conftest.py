"""Shared test oracles, independent of the library's computation paths."""

import numpy as np
import pytest


def pearson_two_pass(h, l):
    """Textbook two-pass Pearson correlation: means first, then centered
    sums. Independent oracle for the library's single-pass engine."""
    h = np.asarray(h, dtype=np.float64)
    l = np.asarray(l, dtype=np.float64)
    hm = h.mean()
    lm = l.mean()
    num = float(((h - hm) * (l - lm)).sum())
    den = float(np.sqrt(((h - hm) ** 2).sum() * ((l - lm) ** 2).sum()))
    return num / den


def popcount_oracle(value, width):
    """Bit-string Hamming weight via Python formatting."""
    pattern = value & ((1 << width) - 1)
    return format(pattern, "b").count("1")


def im2col_oracle(image, kh, kw, stride=(1, 1), padding=(0, 0)):
    """Brute-force patch extraction for one (C, H, W) image: loops only."""
    image = np.asarray(image)
    c, h, w = image.shape
    sh, sw = stride
    ph, pw = padding
    padded = np.zeros((c, h + 2 * ph, w + 2 * pw), dtype=image.dtype)
    padded[:, ph : ph + h, pw : pw + w] = image
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    patches = []
    for i in range(ho):
        for j in range(wo):
            patch = []
            for ch in range(c):
                for r in range(kh):
                    for col in range(kw):
                        patch.append(int(padded[ch, i * sh + r, j * sw + col]))
            patches.append(patch)
    return np.array(patches, dtype=np.int64)


@pytest.fixture
def rng():
    return np.random.default_rng(20260809)
