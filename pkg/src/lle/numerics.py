"""Deterministic randomness, flat-array persistence, and scalar metrics.

Everything downstream draws noise through :class:`RngStream`, so a run is
reproducible from (base_seed, stream_id) alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ARRAY_MAGIC = b"LLEF64\n"


class FormatError(ValueError):
    """Raised when an array file is malformed; message names the byte offset."""


class DimensionError(ValueError):
    """Raised on mismatched vector lengths."""


@dataclass
class RngStream:
    """Counter-based random stream, splittable by (base_seed, stream_id).

    Backed by the Philox 4x64 counter-based generator. Streams with the
    same (base_seed, stream_id) replay the same sequence; different
    stream_ids are independent. The counter advances once per draw call,
    so the sequence depends only on the order of calls.
    """

    base_seed: int
    stream_id: int = 0
    counter: int = 0

    def child(self, stream_id: int) -> "RngStream":
        """Fresh stream sharing base_seed, with its own id and zero counter."""
        return RngStream(self.base_seed, stream_id, 0)

    def _generator(self) -> np.random.Generator:
        bitgen = np.random.Philox(
            key=(self.base_seed & 0xFFFFFFFFFFFFFFFF)
            ^ ((self.stream_id & 0xFFFFFFFFFFFFFFFF) << 64),
            counter=self.counter << 66,
        )
        return np.random.Generator(bitgen)

    def standard_normal(self, shape) -> np.ndarray:
        """Draw i.i.d. N(0,1) deviates and advance the counter by one block."""
        gen = self._generator()
        self.counter += 1
        return gen.standard_normal(shape)

    def uniform(self, shape) -> np.ndarray:
        gen = self._generator()
        self.counter += 1
        return gen.random(shape)

    def integers(self, low: int, high: int, shape) -> np.ndarray:
        gen = self._generator()
        self.counter += 1
        return gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        gen = self._generator()
        self.counter += 1
        return gen.permutation(n)


def sample_standard_normal(stream: RngStream, n: int) -> np.ndarray:
    """n i.i.d. standard-normal deviates from the stream."""
    if n == 0:
        return np.empty(0)
    return stream.standard_normal(n)


def save_array(path, rows: int, cols: int, data: np.ndarray) -> None:
    """Write a rows x cols float64 matrix in the LLEF64 container.

    Layout: ASCII magic ``LLEF64\\n``, ASCII ``"<rows> <cols>\\n"``, then
    rows*cols little-endian IEEE-754 float64. Round-trips bit-exactly.
    """
    flat = np.ascontiguousarray(data, dtype="<f8").reshape(-1)
    if flat.size != rows * cols:
        raise DimensionError(
            f"data has {flat.size} entries, expected {rows}x{cols}={rows * cols}"
        )
    with open(path, "wb") as f:
        f.write(ARRAY_MAGIC)
        f.write(f"{rows} {cols}\n".encode("ascii"))
        f.write(flat.tobytes())


def load_array(path):
    """Read an LLEF64 file; returns (rows, cols, data) with data shaped (rows, cols)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(ARRAY_MAGIC)] != ARRAY_MAGIC:
        raise FormatError(f"bad magic at byte offset 0: {blob[:7]!r}")
    offset = len(ARRAY_MAGIC)
    end = blob.find(b"\n", offset)
    if end < 0:
        raise FormatError(f"missing header line terminator after byte offset {offset}")
    try:
        rows_s, cols_s = blob[offset:end].decode("ascii").split()
        rows, cols = int(rows_s), int(cols_s)
    except ValueError as exc:
        raise FormatError(f"bad header at byte offset {offset}") from exc
    payload = blob[end + 1 :]
    expected = rows * cols * 8
    if len(payload) != expected:
        raise FormatError(
            f"payload truncated at byte offset {end + 1 + len(payload)}: "
            f"have {len(payload)} bytes, expected {expected}"
        )
    data = np.frombuffer(payload, dtype="<f8").reshape(rows, cols).copy()
    return rows, cols, data


def mse(x: np.ndarray, ref: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if x.shape != ref.shape:
        raise DimensionError(f"shape mismatch: {x.shape} vs {ref.shape}")
    return float(np.mean((x - ref) ** 2))


def psnr(x: np.ndarray, ref: np.ndarray, peak: float = 2.0) -> float:
    """Peak signal-to-noise ratio in dB; +inf when x == ref.

    peak defaults to 2.0 for signals living in [-1, 1].
    """
    if peak <= 0:
        raise ValueError("peak must be positive")
    err = mse(x, ref)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


@dataclass
class MetricReport:
    mse: float
    psnr_db: float
    oracle_mse: float | None = None
