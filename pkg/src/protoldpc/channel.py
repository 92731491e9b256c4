"""BPSK over AWGN / Rayleigh fading with LLR demapping and puncturing."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np


class ChannelKind(str, Enum):
    AWGN = "awgn"
    RAYLEIGH = "rayleigh"


@dataclass(frozen=True)
class ChannelConfig:
    kind: ChannelKind
    ebn0_db: float
    rate: float
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", ChannelKind(self.kind))
        if not 0 < self.rate <= 1:
            raise ValueError(f"rate must lie in (0, 1], got {self.rate}")

    @property
    def sigma(self) -> float:
        return ebn0_to_sigma(self.ebn0_db, self.rate)


@dataclass(frozen=True, eq=False)
class LlrFrame:
    """Channel LLRs over all ``n`` codeword positions plus the sent bits.

    ``values`` and ``labels`` are ``(n,)`` for one frame or ``(B, n)`` for a
    batch.  Untransmitted positions hold exactly 0.
    """

    values: np.ndarray
    labels: np.ndarray


def ebn0_to_sigma(ebn0_db: float, rate: float) -> float:
    """Noise standard deviation for unit-energy BPSK at bit SNR ``ebn0_db``."""
    if not 0 < rate <= 1:
        raise ValueError(f"rate must lie in (0, 1], got {rate}")
    return math.sqrt(1.0 / (2.0 * rate * 10.0 ** (ebn0_db / 10.0)))


def _positions(mask_or_positions, n):
    a = np.asarray(mask_or_positions)
    if a.dtype == bool:
        if a.shape[-1] != n:
            raise ValueError(f"transmit mask has length {a.shape[-1]}, codeword {n}")
        return np.flatnonzero(a)
    return a.astype(np.int64)


def transmit_and_demap(codeword, tx, cfg: ChannelConfig, rng: np.random.Generator | None = None,
                       noise: np.ndarray | None = None) -> LlrFrame:
    """Send ``codeword`` (``(n,)`` or ``(B, n)``) over the channel.

    ``tx`` is a boolean transmit mask of length ``n`` or an index array of
    transmitted positions (indices may repeat; repeated receptions add their
    LLRs).  ``noise`` replaces the Gaussian draw when given, with one value per
    transmitted symbol.
    """
    x = np.asarray(codeword)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    B, n = x.shape
    pos = _positions(tx, n)
    s = 1.0 - 2.0 * x[:, pos].astype(np.float64)
    sigma = cfg.sigma
    var = sigma * sigma
    if var <= 0 or not math.isfinite(var):
        raise ValueError("noise variance must be positive and finite")
    if noise is None:
        if rng is None:
            raise ValueError("rng is required unless noise is given")
        w = rng.standard_normal(s.shape) * sigma
    else:
        w = np.broadcast_to(np.asarray(noise, dtype=np.float64), s.shape)
    if cfg.kind is ChannelKind.AWGN:
        llr_tx = 2.0 * (s + w) / var
    else:
        if rng is None:
            raise ValueError("rng is required for fading")
        # |h| with E[h^2] = 1, independent per symbol, known at the receiver
        h = np.sqrt(0.5 * (rng.standard_normal(s.shape) ** 2 + rng.standard_normal(s.shape) ** 2))
        llr_tx = 2.0 * h * (h * s + w) / var
    values = np.zeros((B, n))
    if np.unique(pos).size == pos.size:
        values[:, pos] = llr_tx
    else:
        for b in range(B):
            values[b] = np.bincount(pos, weights=llr_tx[b], minlength=n)
    labels = x.astype(np.uint8)
    if single:
        return LlrFrame(values[0], labels[0])
    return LlrFrame(values, labels)
