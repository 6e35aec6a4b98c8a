"""Distance primitives on complex entity vectors and relation/rule angles.

Entities are complex vectors (``numpy`` complex arrays), relations and rules
are stored as angle vectors in radians.  All rule distances wrap the
residual angle to ``[-pi, pi)`` before taking the norm.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

TWO_PI = 2.0 * np.pi


def wrap_angle(x):
    """Map angles to their canonical representative in ``[-pi, pi)``."""
    return np.mod(np.asarray(x, dtype=np.float64) + np.pi, TWO_PI) - np.pi


def _norm(x: np.ndarray, norm: str | int) -> float:
    if norm in ("L1", 1, "1"):
        return float(np.sum(np.abs(x)))
    if norm in ("L2", 2, "2"):
        return float(np.sqrt(np.sum(np.abs(x) ** 2)))
    raise ValueError(f"unknown norm {norm!r}; expected L1 or L2")


def _check_dims(*arrays: np.ndarray) -> None:
    k = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != k:
            raise ValueError(f"dimension mismatch: {k} vs {a.shape}")


def rotate(h, theta) -> np.ndarray:
    """Rotate each complex coordinate of ``h`` by the matching angle."""
    h = np.asarray(h, dtype=np.complex128)
    theta = np.asarray(theta, dtype=np.float64)
    _check_dims(h, theta)
    return h * np.exp(1j * theta)


def rotate_distance(h, theta, t, norm: str = "L1") -> float:
    """``||h o r - t||`` where ``r`` has unit modulus and phases ``theta``.

    With ``L1`` the result is the sum of per-coordinate complex moduli.
    """
    h = np.asarray(h, dtype=np.complex128)
    t = np.asarray(t, dtype=np.complex128)
    theta = np.asarray(theta, dtype=np.float64)
    _check_dims(h, theta, t)
    return _norm(h * np.exp(1j * theta) - t, norm)


def transe_distance(h, r, t, norm: str = "L1") -> float:
    """``||h + r - t||`` on real vectors (imaginary parts are ignored)."""
    h = np.real(np.asarray(h)).astype(np.float64)
    r = np.real(np.asarray(r)).astype(np.float64)
    t = np.real(np.asarray(t)).astype(np.float64)
    _check_dims(h, r, t)
    return _norm(h + r - t, norm)


def rule_residual(body: Sequence, head, rule) -> np.ndarray:
    """Wrapped per-dimension residual ``sum(body) + rule - head``."""
    if len(body) == 0:
        raise ValueError("rule body must contain at least one relation")
    body = [np.asarray(b, dtype=np.float64) for b in body]
    head = np.asarray(head, dtype=np.float64)
    rule = np.asarray(rule, dtype=np.float64)
    _check_dims(*body, head, rule)
    return wrap_angle(np.sum(body, axis=0) + rule - head)


def rule_distance(body: Sequence, head, rule, norm: str = "L1") -> float:
    """Distance between the composed body rotation (times the rule) and the head."""
    return _norm(rule_residual(body, head, rule), norm)


def positional_residual(body: Sequence, head, rule_positions: Sequence) -> np.ndarray:
    if len(body) == 0:
        raise ValueError("rule body must contain at least one relation")
    if len(rule_positions) != len(body):
        raise ValueError(
            f"positional rule has {len(rule_positions)} blocks for a body of length {len(body)}"
        )
    body = [wrap_angle(b) for b in body]
    blocks = [np.asarray(p, dtype=np.float64) for p in rule_positions]
    head = np.asarray(head, dtype=np.float64)
    _check_dims(*body, *blocks, head)
    total = sum(b * p for b, p in zip(body, blocks))
    return wrap_angle(total - head)


def rule_distance_positional(body: Sequence, head, rule_positions: Sequence, norm: str = "L1") -> float:
    """Order-aware rule distance: each body angle is scaled element-wise by its own block."""
    return _norm(positional_residual(body, head, rule_positions), norm)
