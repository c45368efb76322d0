"""Fixed-length masked batching and the relative hand geometry stream.

Records of arbitrary length are normalized to T frames (random deletion when
too long, zero padding when too short) and split into three streams:

  A: hand shape, T x 126
  B: lip shape, T x 120
  C: arm points plus hand-center distance and angle, T x 14

Padding is always a suffix and padded rows are all-zero in every stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .featurestore import ARM_DIM, HAND_DIM, LIP_DIM, Center, FeatureSequence, FrameFeatures

STREAM_A_DIM = HAND_DIM
STREAM_B_DIM = LIP_DIM
STREAM_C_DIM = ARM_DIM + 2
DEFAULT_T = 40

# Fallback center for a hand that was never observed: bottom center of the
# normalized image (y grows downward).
_FALLBACK_CENTER = (0.5, 1.0)


@dataclass(frozen=True)
class StreamBatch:
    """One record, normalized to T frames and split into the three streams."""

    stream_a: np.ndarray  # (T, 126)
    stream_b: np.ndarray  # (T, 120)
    stream_c: np.ndarray  # (T, 14)
    mask: np.ndarray  # (T,) bool, true = real frame

    def __post_init__(self):
        t = self.mask.shape[0]
        shapes = (
            (self.stream_a.shape, (t, STREAM_A_DIM)),
            (self.stream_b.shape, (t, STREAM_B_DIM)),
            (self.stream_c.shape, (t, STREAM_C_DIM)),
        )
        for got, want in shapes:
            if got != want:
                raise ValueError(f"stream shape {got} does not match {want}")
        m = self.mask
        if m.dtype != np.bool_:
            raise ValueError("mask must be boolean")
        # padding must be a suffix: no true after a false
        if np.any(m[1:] & ~m[:-1]):
            raise ValueError("mask must be true on a prefix and false on a suffix")
        pad = ~m
        if pad.any():
            for s in (self.stream_a, self.stream_b, self.stream_c):
                if np.any(s[pad]):
                    raise ValueError("masked rows must be all-zero in every stream")

    @property
    def T(self) -> int:
        return self.mask.shape[0]


@dataclass(frozen=True)
class HandTrackState:
    """Last observed center per hand; None means never seen."""

    last_left: Center = None
    last_right: Center = None


def normalize_length(
    seq: FeatureSequence, T: int = DEFAULT_T, rng: Optional[np.random.Generator] = None
) -> tuple[FeatureSequence, np.ndarray]:
    """Force seq to exactly T frames.

    Longer inputs lose a uniformly random set of frames (survivors keep their
    original order); shorter inputs gain trailing all-zero frames, marked
    false in the returned mask. Pass a seeded generator for reproducible
    deletion; a fresh default generator is used when rng is None.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    n = len(seq)
    if n == T:
        return seq, np.ones(T, dtype=bool)
    if n > T:
        if rng is None:
            rng = np.random.default_rng()
        keep = np.sort(rng.choice(n, size=T, replace=False))
        frames = tuple(seq.frames[i] for i in keep)
        return (
            FeatureSequence(frames, seq.label_id, seq.signer_id, seq.gloss),
            np.ones(T, dtype=bool),
        )
    pad = tuple(FrameFeatures.zero() for _ in range(T - n))
    mask = np.zeros(T, dtype=bool)
    mask[:n] = True
    return FeatureSequence(seq.frames + pad, seq.label_id, seq.signer_id, seq.gloss), mask


def hand_geometry(
    centers: tuple[Center, Center], state: HandTrackState
) -> tuple[float, float, HandTrackState]:
    """Distance and angle between the two effective hand centers.

    An absent hand falls back to its last observed center, or to the bottom
    center of the image if it was never seen. The angle is atan2 of the
    left-to-right segment (image coordinates, y downward), zero when the
    centers coincide. Returns the updated tracking state.
    """
    left, right = centers
    eff_left = left if left is not None else (state.last_left or _FALLBACK_CENTER)
    eff_right = right if right is not None else (state.last_right or _FALLBACK_CENTER)
    dx = eff_right[0] - eff_left[0]
    dy = eff_right[1] - eff_left[1]
    distance = math.hypot(dx, dy)
    angle = math.atan2(dy, dx) if distance > 0.0 else 0.0
    new_state = HandTrackState(
        left if left is not None else state.last_left,
        right if right is not None else state.last_right,
    )
    return distance, angle, new_state


def assemble_streams(
    seq: FeatureSequence, T: int = DEFAULT_T, rng: Optional[np.random.Generator] = None
) -> StreamBatch:
    """Normalize seq to T frames and split it into the three input streams.

    Geometry state is threaded across the retained real frames only; padded
    rows stay exactly zero in all streams.
    """
    norm, mask = normalize_length(seq, T, rng)
    a = np.zeros((T, STREAM_A_DIM))
    b = np.zeros((T, STREAM_B_DIM))
    c = np.zeros((T, STREAM_C_DIM))
    state = HandTrackState()
    for t, frame in enumerate(norm.frames):
        if not mask[t]:
            break
        a[t] = frame.hand_shape
        b[t] = frame.lip_shape
        c[t, :ARM_DIM] = frame.arm_points
        distance, angle, state = hand_geometry(frame.hand_centers, state)
        c[t, ARM_DIM] = distance
        c[t, ARM_DIM + 1] = angle
    return StreamBatch(a, b, c, mask)


def stack_batches(
    batches: Sequence[StreamBatch],
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Stack per-record StreamBatches into (B,T,d) arrays plus a (B,T) mask."""
    if not batches:
        raise ValueError("cannot stack zero batches")
    a = np.stack([sb.stream_a for sb in batches])
    b = np.stack([sb.stream_b for sb in batches])
    c = np.stack([sb.stream_c for sb in batches])
    m = np.stack([sb.mask for sb in batches])
    return a, b, c, m
