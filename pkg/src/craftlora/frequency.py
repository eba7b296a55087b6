"""Frequency-domain image decomposition on an orthonormal DCT-II basis.

Content is carried by low radial frequencies, style by the residual. The
normalized cutoff is measured as a fraction of the Nyquist radial frequency.
"""

from dataclasses import dataclass

import numpy as np
from scipy.fft import dctn, idctn

from .exceptions import BadCutoff, ShapeMismatch
from .validation import as_image


def dct2(x):
    return dctn(x, type=2, norm="ortho")


def idct2(x):
    return idctn(x, type=2, norm="ortho")


def radial_frequency(height, width):
    """Radial frequency of each DCT coefficient in units of Nyquist."""
    fy = np.arange(height) / height
    fx = np.arange(width) / width
    return np.hypot(fy[:, None], fx[None, :])


def gaussian_lowpass(img, sigma):
    """Gaussian low-pass: spectrum scaled by exp(-(f / (sigma * f_nyq))^2 / 2).

    The DC coefficient is preserved exactly, so the output mean equals the
    input mean; constant images pass through unchanged.
    """
    img = as_image(img)
    if not 0.0 < sigma <= 1.0:
        raise BadCutoff(f"sigma must lie in (0, 1], got {sigma}")
    if np.all(img == img.flat[0]):
        return img.copy()  # pure DC; the filter is the identity
    rho = radial_frequency(*img.shape)
    gain = np.exp(-0.5 * (rho / sigma) ** 2)
    gain[0, 0] = 1.0
    return idct2(gain * dct2(img))


def style_residual(img, sigma):
    """High-frequency remainder ``img - gaussian_lowpass(img, sigma)``.

    Values are signed; together with the low-pass part it reconstructs the
    input exactly.
    """
    img = as_image(img)
    return img - gaussian_lowpass(img, sigma)


@dataclass(frozen=True)
class FrequencyMask:
    """Binary radial mask over DCT coefficients.

    The mask cutoff is measured against the diagonal Nyquist frequency, so
    the open interval (0, 1) spans the whole spectrum: a low mask near 1
    keeps everything, a high mask near 1 keeps nothing. The low and high
    masks at the same cutoff partition the spectrum, so filtering with both
    and summing reproduces the input.
    """

    kind: str
    cutoff: float

    def __post_init__(self):
        if self.kind not in ("low", "high"):
            raise ValueError(f"mask kind must be 'low' or 'high', got {self.kind!r}")
        if not 0.0 < self.cutoff < 1.0:
            raise BadCutoff(f"cutoff must lie in (0, 1), got {self.cutoff}")

    def array(self, height, width):
        rho = radial_frequency(height, width) / np.sqrt(2.0)
        low = rho <= self.cutoff
        mask = low if self.kind == "low" else ~low
        return mask.astype(np.float64)


def freq_mask_filter(latent, mask):
    """Apply a binary frequency mask: ``idct2(mask * dct2(latent))``."""
    latent = as_image(latent, "latent")
    if not isinstance(mask, FrequencyMask):
        raise ShapeMismatch("mask must be a FrequencyMask")
    return idct2(mask.array(*latent.shape) * dct2(latent))
