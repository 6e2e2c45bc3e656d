"""Random Replace and Extrude (RRE) augmentation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional


from cadseq.cad_core import (
    CadSequence, CommandType, GrammarViolation, arc, join_pairs, split_pairs,
    validate_structure,
)
from cadseq.geometry import DEFAULT_RESOLUTION, GeometricInvalidity, realize


@dataclass
class RreConfig:
    p_line: float = 0.2
    p_ext: float = 0.3
    p_swap: float = 0.5
    seed: int = 0
    # re-draws of a per-sequence augmentation before keeping the input as is
    max_tries: int = 4
    check_geometry: bool = True
    resolution: int = DEFAULT_RESOLUTION

    def __post_init__(self):
        for name in ("p_line", "p_ext", "p_swap"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}={p} must lie in [0, 1]")


def is_valid(seq: CadSequence, cfg: Optional[RreConfig] = None) -> bool:
    """Structural validity plus, when enabled, a successful voxel realization."""
    if not validate_structure(seq):
        return False
    if cfg is not None and not cfg.check_geometry:
        return True
    try:
        realize(seq, cfg.resolution if cfg else DEFAULT_RESOLUTION)
    except GeometricInvalidity:
        return False
    return True


def _retry(seq: CadSequence, draw: Callable, cfg: RreConfig, rng) -> CadSequence:
    for _ in range(cfg.max_tries):
        out = draw(seq, cfg, rng)
        if out == seq or is_valid(out, cfg):
            return out
    return seq


def _replace_lines_once(seq: CadSequence, cfg: RreConfig, rng) -> CadSequence:
    cmds = list(seq.commands)
    changed = False
    for i, cmd in enumerate(cmds):
        if cmd.ctype != CommandType.LINE:
            continue
        if rng.random() < cfg.p_line:
            theta = int(rng.integers(1, 256))
            c = int(rng.integers(0, 2))
            cmds[i] = arc(cmd["x"], cmd["y"], theta, c)
            changed = True
    return CadSequence(tuple(cmds), seq.max_len) if changed else seq


def replace_lines(seq: CadSequence, cfg: RreConfig, rng) -> CadSequence:
    """Turn a random subset of lines into arcs with the same endpoint."""
    return _retry(seq, _replace_lines_once, cfg, rng)


def _randomize_once(seq: CadSequence, cfg: RreConfig, rng) -> CadSequence:
    cmds = list(seq.commands)
    changed = False
    for i, cmd in enumerate(cmds):
        if cmd.ctype != CommandType.EXTRUDE:
            continue
        if rng.random() < cfg.p_ext:
            w = int(rng.integers(0, 3))
            while True:
                d1, d2 = (int(v) for v in rng.integers(0, 256, size=2))
                # symmetric extrusions only use d1
                if (d1 > 0) if w == 1 else (d1 + d2 > 0):
                    break
            cmds[i] = cmd.replace(w=w, d1=d1, d2=d2)
            changed = True
    return CadSequence(tuple(cmds), seq.max_len) if changed else seq


def randomize_extrusions(seq: CadSequence, cfg: RreConfig, rng) -> CadSequence:
    """Resample extrude type and both depths of a random subset of extrusions."""
    return _retry(seq, _randomize_once, cfg, rng)


def swap_pairs(a: CadSequence, b: CadSequence, cfg: RreConfig, rng):
    """Exchange one randomly chosen sketch-extrude pair between ``a`` and ``b``.

    The swap is abandoned (inputs returned unchanged) when a result would be
    too long or invalid.
    """
    if rng.random() >= cfg.p_swap:
        return a, b
    try:
        pa, pb = split_pairs(a), split_pairs(b)
    except GrammarViolation:
        return a, b
    if not pa or not pb:
        return a, b
    i = int(rng.integers(0, len(pa)))
    j = int(rng.integers(0, len(pb)))
    pa[i], pb[j] = pb[j], pa[i]
    la = sum(len(p) for p in pa)
    lb = sum(len(p) for p in pb)
    if la > a.max_len - 1 or lb > b.max_len - 1:
        return a, b
    a2, b2 = join_pairs(pa, a.max_len), join_pairs(pb, b.max_len)
    if not (is_valid(a2, cfg) and is_valid(b2, cfg)):
        return a, b
    return a2, b2


def augment_batch(batch: list, cfg: RreConfig, rng) -> list:
    """Line replacement, extrusion randomization, then a swap with a random
    partner, for every element of ``batch``."""
    out = [randomize_extrusions(replace_lines(s, cfg, rng), cfg, rng) for s in batch]
    n = len(out)
    if n < 2:
        return out
    for i in range(n):
        j = int(rng.integers(0, n - 1))
        if j >= i:
            j += 1
        out[i], out[j] = swap_pairs(out[i], out[j], cfg, rng)
    return out


def line_arc_stats(seqs) -> dict:
    """Fractions of sequences containing lines, arcs and circles."""
    n = max(len(seqs), 1)
    has = lambda t: sum(1 for s in seqs if any(c.ctype == t for c in s.commands)) / n  # noqa: E731
    return {"line": has(CommandType.LINE), "arc": has(CommandType.ARC),
            "circle": has(CommandType.CIRCLE)}
