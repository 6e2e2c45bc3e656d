"""Random valid construction sequences with a line-heavy command mix."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from cadseq.cad_core import (
    CUT, JOIN, MAX_LEN, ONE_SIDED, SYMMETRIC, TWO_SIDED, CadSequence, Record,
    arc, circle, extrude, line, quantize_param, sol,
)
from cadseq.rre import is_valid

# Joint distribution over the curve kinds a sequence contains. The marginals
# are 78% line, 43% circle, 20% arc.
KIND_MIX = {
    ("line",): 0.42,
    ("circle",): 0.20,
    ("line", "circle"): 0.18,
    ("line", "arc"): 0.13,
    ("line", "arc", "circle"): 0.05,
    ("arc",): 0.02,
}

PROFILES = {
    "poly": {"line"},
    "arcpoly": {"arc"},
    "circle": {"circle"},
    "ring": {"circle"},
    "poly_arc": {"line", "arc"},
    "poly_hole": {"line", "circle"},
    "poly_arc_hole": {"line", "arc", "circle"},
}

EXTRUDE_TYPES = (ONE_SIDED, SYMMETRIC, TWO_SIDED)
EXTRUDE_TYPE_P = (0.90, 0.08, 0.02)

# plane orientations (alpha, beta, gamma): normal along z, x, y
ORIENTATIONS = [(0.0, 0.0, 0.0), (0.0, math.pi / 2, 0.0), (-math.pi / 2, 0.0, 0.0)]


@dataclass
class SynthConfig:
    max_pairs: int = 3
    max_len: int = MAX_LEN
    p_cut: float = 0.15
    max_curves: int = 8


def _xy(x: float, y: float) -> tuple:
    return quantize_param("x", x), quantize_param("y", y)


def _vertex_count(rng, max_curves: int) -> int:
    # squares and hexagons are over-represented so permutation probes exist
    choices = [k for k in (3, 4, 5, 6, 7, 8) if k <= max_curves]
    weights = np.array([1.0 if k not in (4, 6) else 3.0 for k in choices])
    return int(rng.choice(choices, p=weights / weights.sum()))


def _polygon(rng, k: int, radius: float) -> list:
    if k == 4 and rng.random() < 0.5:
        hw, hh = radius * rng.uniform(0.6, 0.8), radius * rng.uniform(0.6, 0.8)
        return [(hw, -hh), (hw, hh), (-hw, hh), (-hw, -hh)]
    base = rng.uniform(0, 2 * math.pi / k)
    jitter = rng.uniform(-0.25, 0.25, size=k) * (math.pi / k)
    ang = base + 2 * math.pi * np.arange(k) / k + jitter
    return [(radius * math.cos(a), radius * math.sin(a)) for a in ang]


def _poly_loop(rng, cfg: SynthConfig, arcs: str) -> list:
    """``arcs`` is 'none', 'some' or 'all'."""
    k = _vertex_count(rng, cfg.max_curves)
    verts = _polygon(rng, k, rng.uniform(0.6, 0.9))
    if arcs == "some":
        n_arc = int(rng.integers(1, max(2, k // 2 + 1)))
        arc_idx = set(rng.choice(k, size=n_arc, replace=False).tolist())
    elif arcs == "all":
        arc_idx = set(range(k))
    else:
        arc_idx = set()
    cmds = [sol()]
    for i, (x, y) in enumerate(verts):
        qx, qy = _xy(x, y)
        if i in arc_idx:
            cmds.append(arc(qx, qy, int(rng.integers(12, 48)), int(rng.integers(0, 2))))
        else:
            cmds.append(line(qx, qy))
    return cmds


def _circle_loop(rng, r: float, cx: float = 0.0, cy: float = 0.0) -> list:
    qx, qy = _xy(cx, cy)
    return [sol(), circle(qx, qy, quantize_param("r", r))]


def _profile(rng, kind: str, cfg: SynthConfig) -> list:
    if kind == "poly":
        return _poly_loop(rng, cfg, "none")
    if kind == "arcpoly":
        return _poly_loop(rng, cfg, "all")
    if kind == "poly_arc":
        return _poly_loop(rng, cfg, "some")
    if kind == "circle":
        c = rng.uniform(-0.1, 0.1, size=2)
        return _circle_loop(rng, rng.uniform(0.4, 0.9), *c)
    if kind == "ring":
        outer = rng.uniform(0.6, 0.95)
        return _circle_loop(rng, outer) + _circle_loop(rng, outer * rng.uniform(0.35, 0.7))
    if kind == "poly_hole":
        return _poly_loop(rng, cfg, "none") + _circle_loop(rng, rng.uniform(0.1, 0.2))
    if kind == "poly_arc_hole":
        return _poly_loop(rng, cfg, "some") + _circle_loop(rng, rng.uniform(0.1, 0.2))
    raise ValueError(kind)


def _extrude(rng, first: bool, cfg: SynthConfig):
    a, b, g = ORIENTATIONS[int(rng.integers(0, len(ORIENTATIONS)))]
    o = rng.uniform(-0.35, 0.35, size=3)
    w = int(rng.choice(EXTRUDE_TYPES, p=EXTRUDE_TYPE_P))
    d1 = rng.uniform(0.15, 0.6)
    d2 = rng.uniform(0.1, 0.4) if w == TWO_SIDED else 0.0
    op = JOIN if first or rng.random() >= cfg.p_cut else CUT
    q = quantize_param
    return extrude(
        alpha=q("alpha", a), beta=q("beta", b), gamma=q("gamma", g),
        o_x=q("o_x", o[0]), o_y=q("o_y", o[1]), o_z=q("o_z", o[2]),
        s=q("s", rng.uniform(0.3, 0.7)), d1=q("d1", d1), d2=q("d2", d2) if d2 else 0,
        b=op, w=w,
    )


def _kinds(rng) -> set:
    keys = list(KIND_MIX)
    p = np.array([KIND_MIX[k] for k in keys])
    return set(keys[int(rng.choice(len(keys), p=p / p.sum()))])


def _draw(rng, cfg: SynthConfig) -> CadSequence:
    kinds = _kinds(rng)
    allowed = [k for k, uses in PROFILES.items() if uses <= kinds]
    n_pairs = int(rng.integers(1, cfg.max_pairs + 1))
    while True:
        chosen = [allowed[int(rng.integers(0, len(allowed)))] for _ in range(n_pairs)]
        covered = set().union(*(PROFILES[c] for c in chosen))
        if covered == kinds:
            break
        # widen to cover every requested kind
        if n_pairs < cfg.max_pairs and rng.random() < 0.5:
            n_pairs += 1
    cmds = []
    for i, kind in enumerate(chosen):
        cmds += _profile(rng, kind, cfg)
        cmds.append(_extrude(rng, i == 0, cfg))
    return cmds


def synth_sequence(rng, cfg: SynthConfig = SynthConfig(), max_tries: int = 1000) -> CadSequence:
    """Draw until the sequence fits in ``cfg.max_len`` and realizes to a solid."""
    for _ in range(max_tries):
        cmds = _draw(rng, cfg)
        if len(cmds) > cfg.max_len - 1:
            continue
        seq = CadSequence(tuple(cmds), cfg.max_len)
        if is_valid(seq):
            return seq
    raise RuntimeError("could not draw a valid sequence; loosen the synth config")


def synth_corpus(count: int, seed: int = 0, cfg: SynthConfig = SynthConfig()) -> list:
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    return [Record(f"synth-{i:06d}", synth_sequence(rng, cfg)) for i in range(count)]
