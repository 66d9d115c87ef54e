"""Input validation helpers and the error taxonomy shared by all modules."""
from __future__ import annotations

import numpy as np


class InputError(ValueError):
    """Caller supplied an argument outside the documented contract."""


class GenerationError(RuntimeError):
    """A bounded stochastic search (for example mask sampling) was exhausted."""


class FormatError(RuntimeError):
    """A persisted file is corrupt, truncated, or of an unknown version."""


class StateError(RuntimeError):
    """An operation was invoked on an object in the wrong state."""


class TrainingDiverged(RuntimeError):
    """Training produced a non-finite loss; carries step diagnostics."""


def check_image(img, channels: int | None = None, multiple_of: int | None = None,
                name: str = "image") -> np.ndarray:
    """Validate an image array and return it as float32.

    Accepts (H, W) or (H, W, C) arrays with samples in [0, 1]. A tolerance of
    1e-6 absorbs float round-off from upstream arithmetic; anything further out
    is rejected rather than silently clipped.
    """
    arr = np.asarray(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim not in (2, 3):
        raise InputError(f"{name}: expected 2 or 3 dimensions, got shape {arr.shape}")
    if arr.ndim == 3 and arr.shape[2] != 3:
        raise InputError(f"{name}: expected 1 or 3 channels, got {arr.shape[2]}")
    got = 3 if arr.ndim == 3 else 1
    if channels is not None and got != channels:
        raise InputError(f"{name}: expected {channels} channel(s), got {got}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InputError(f"{name}: empty spatial dimensions {arr.shape}")
    if multiple_of is not None:
        h, w = arr.shape[:2]
        if h % multiple_of or w % multiple_of:
            raise InputError(
                f"{name}: dimensions {h}x{w} must be multiples of {multiple_of}")
    arr = arr.astype(np.float32, copy=False)
    if arr.size:
        lo = float(arr.min())
        hi = float(arr.max())
        if lo < -1e-6 or hi > 1 + 1e-6:
            raise InputError(f"{name}: samples outside [0, 1] (min {lo}, max {hi})")
        if lo < 0.0 or hi > 1.0:
            arr = np.clip(arr, 0.0, 1.0)
    return arr


def check_same_shape(a: np.ndarray, b: np.ndarray, names=("a", "b")) -> None:
    if a.shape != b.shape:
        raise InputError(
            f"{names[0]} and {names[1]} must share shape, got {a.shape} vs {b.shape}")


def check_batch_images(x, resolution: int | None = None, name: str = "X") -> np.ndarray:
    """Validate a batch of RGB images shaped (N, H, W, 3); returns float32."""
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise InputError(f"{name}: expected (N, H, W, 3), got shape {arr.shape}")
    if resolution is not None and arr.shape[1:3] != (resolution, resolution):
        raise InputError(
            f"{name}: expected {resolution}x{resolution} images, got {arr.shape[1:3]}")
    if arr.size and (arr.min() < -1e-6 or arr.max() > 1 + 1e-6):
        raise InputError(f"{name}: samples outside [0, 1]")
    return np.clip(arr, 0.0, 1.0)


def check_in(value, options, name: str):
    if value not in options:
        raise InputError(f"{name} must be one of {sorted(options)}, got {value!r}")
    return value
