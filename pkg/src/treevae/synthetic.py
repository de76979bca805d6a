"""Procedural vessel-tree fixtures grown by random recursive bifurcation."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .tree import NO_CHILD, VesselTree


@dataclass(frozen=True)
class SynthParams:
    max_height: int = 5
    branch_prob: float = 0.35
    stop_prob: float = 0.1
    segment_length: tuple[float, float] = (0.6, 1.4)
    branch_angle: float = 35.0  # degrees, half-angle between daughters
    jitter: float = 12.0  # degrees of random bend per segment
    root_radius: tuple[float, float] = (0.3, 0.6)
    decay: float = 0.85

    def to_dict(self):
        return asdict(self)


def _unit(v):
    return v / np.linalg.norm(v)


def _rotate(v, axis, angle):
    """Rodrigues rotation of ``v`` about unit ``axis``."""
    c, s = np.cos(angle), np.sin(angle)
    return v * c + np.cross(axis, v) * s + axis * (axis @ v) * (1 - c)


def _perpendicular(v, rng):
    a = rng.normal(size=3)
    a -= (a @ v) * v
    return _unit(a)


def generate_tree(rng: np.random.Generator, params: SynthParams = SynthParams()) -> VesselTree:
    attrs = []
    left, right = [], []

    def add(pos, r):
        attrs.append([*pos, r])
        left.append(NO_CHILD)
        right.append(NO_CHILD)
        return len(attrs) - 1

    lo, hi = params.root_radius
    root = add(np.zeros(3), rng.uniform(lo, hi))
    jitter = np.deg2rad(params.jitter)
    half = np.deg2rad(params.branch_angle)
    stack = [(root, _unit(np.array([0.0, 0.0, 1.0]) + 0.2 * rng.normal(size=3)), 0)]
    while stack:
        node, direction, depth = stack.pop()
        if depth >= params.max_height:
            continue
        # the root always gets a child so no tree is a single point
        if depth > 0 and rng.random() < params.stop_prob:
            continue
        pos, r = np.asarray(attrs[node][:3]), attrs[node][3]
        child_r = r * params.decay
        if rng.random() < params.branch_prob:
            axis = _perpendicular(direction, rng)
            kids = []
            for sign in (1.0, -1.0):
                d = _unit(_rotate(direction, axis, sign * half + rng.normal(0, jitter)))
                step = rng.uniform(*params.segment_length)
                kids.append((add(pos + step * d, child_r), d))
            left[node], right[node] = kids[0][0], kids[1][0]
            for k, d in kids:
                stack.append((k, d, depth + 1))
        else:
            d = _unit(_rotate(direction, _perpendicular(direction, rng), rng.normal(0, jitter)))
            step = rng.uniform(*params.segment_length)
            k = add(pos + step * d, child_r)
            right[node] = k
            stack.append((k, d, depth + 1))
    return VesselTree(np.array(attrs), left, right, root)


def generate_synthetic_corpus(n: int, seed: int = 0, params: SynthParams | None = None) -> list[VesselTree]:
    """``n`` procedural trees; identical for identical ``seed`` and ``params``."""
    if n <= 0:
        raise ValueError("n must be positive")
    params = params or SynthParams()
    streams = np.random.SeedSequence(seed).spawn(n)
    return [generate_tree(np.random.default_rng(s), params) for s in streams]
