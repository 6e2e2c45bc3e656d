"""Construction-sequence grammar: commands, quantized parameter vectors, parsing.

A sequence is stored as an ``N x 17`` integer matrix. Column 0 holds the
command type, columns 1-16 hold the parameter slots in the order
``x, y, theta, c, r, alpha, beta, gamma, o_x, o_y, o_z, s, d1, d2, b, w``.
Unused slots hold ``-1``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Optional, Sequence

import numpy as np

MAX_LEN = 60
N_PARAMS = 16
N_BINS = 256
PAD = -1


class CommandType(IntEnum):
    SOL = 0
    LINE = 1
    ARC = 2
    CIRCLE = 3
    EXTRUDE = 4
    EOS = 5


N_COMMANDS = len(CommandType)

PARAM_NAMES = (
    "x", "y", "theta", "c", "r",
    "alpha", "beta", "gamma", "o_x", "o_y", "o_z", "s",
    "d1", "d2", "b", "w",
)
SLOT = {name: i for i, name in enumerate(PARAM_NAMES)}

# used-slot mask per command type
SLOT_MASK = np.zeros((N_COMMANDS, N_PARAMS), dtype=bool)
SLOT_MASK[CommandType.LINE, [0, 1]] = True
SLOT_MASK[CommandType.ARC, [0, 1, 2, 3]] = True
SLOT_MASK[CommandType.CIRCLE, [0, 1, 4]] = True
SLOT_MASK[CommandType.EXTRUDE, 5:16] = True

# slots restricted to small categorical ranges
CATEGORICAL_SLOTS = {SLOT["c"]: (0, 1), SLOT["b"]: (0, 1, 2), SLOT["w"]: (0, 1, 2)}

CURVES = (CommandType.LINE, CommandType.ARC, CommandType.CIRCLE)

# boolean operations
JOIN, CUT, INTERSECT = 0, 1, 2
# extrude types
ONE_SIDED, SYMMETRIC, TWO_SIDED = 0, 1, 2


class CadError(ValueError):
    """Base class for grammar and encoding errors."""


class MalformedRow(CadError):
    pass


class GrammarViolation(CadError):
    pass


class OutOfRange(CadError):
    pass


class DegenerateRange(CadError):
    pass


# ---------------------------------------------------------------------------
# quantization


def quantize(value, lo: float, hi: float):
    """Map ``value`` in ``[lo, hi]`` to one of 256 uniform bins.

    Bins are right-closed, so a value sitting exactly on a bin boundary lands
    in the lower bin. Values outside the range are clamped. Works elementwise
    on arrays.
    """
    if not lo < hi:
        raise DegenerateRange(f"lo={lo} must be < hi={hi}")
    u = (np.asarray(value, dtype=np.float64) - lo) / (hi - lo) * N_BINS
    q = np.clip(np.ceil(u) - 1, 0, N_BINS - 1).astype(np.int64)
    return int(q) if q.ndim == 0 else q


def dequantize(q, lo: float, hi: float):
    """Return the center of bin ``q``."""
    if not lo < hi:
        raise DegenerateRange(f"lo={lo} must be < hi={hi}")
    v = lo + (np.asarray(q, dtype=np.float64) + 0.5) * (hi - lo) / N_BINS
    return float(v) if v.ndim == 0 else v


# value range for each parameter family
COORD_RANGE = (-1.0, 1.0)      # x, y, o_x, o_y, o_z
LENGTH_RANGE = (0.0, 2.0)      # r, s, d1, d2
ANGLE_RANGE = (-math.pi, math.pi)  # alpha, beta, gamma
SWEEP_RANGE = (0.0, 2 * math.pi)   # theta

PARAM_FAMILIES = {
    "coord": COORD_RANGE,
    "length": LENGTH_RANGE,
    "angle": ANGLE_RANGE,
    "sweep": SWEEP_RANGE,
}

SLOT_RANGE = {
    "x": COORD_RANGE, "y": COORD_RANGE, "theta": SWEEP_RANGE, "r": LENGTH_RANGE,
    "alpha": ANGLE_RANGE, "beta": ANGLE_RANGE, "gamma": ANGLE_RANGE,
    "o_x": COORD_RANGE, "o_y": COORD_RANGE, "o_z": COORD_RANGE,
    "s": LENGTH_RANGE, "d1": LENGTH_RANGE, "d2": LENGTH_RANGE,
}


def quantize_param(name: str, value: float) -> int:
    lo, hi = SLOT_RANGE[name]
    return quantize(value, lo, hi)


def dequantize_param(name: str, q: int) -> float:
    lo, hi = SLOT_RANGE[name]
    return dequantize(q, lo, hi)


# ---------------------------------------------------------------------------
# commands and sequences


@dataclass(frozen=True)
class CadCommand:
    ctype: CommandType
    params: tuple = (PAD,) * N_PARAMS

    def __post_init__(self):
        object.__setattr__(self, "ctype", CommandType(self.ctype))
        object.__setattr__(self, "params", tuple(int(p) for p in self.params))
        if len(self.params) != N_PARAMS:
            raise MalformedRow(f"expected {N_PARAMS} params, got {len(self.params)}")

    @classmethod
    def _trusted(cls, ctype: int, params: tuple) -> "CadCommand":
        """Build from an already validated row without re-checking it."""
        c = object.__new__(cls)
        object.__setattr__(c, "ctype", CommandType(ctype))
        object.__setattr__(c, "params", params)
        return c

    def __getitem__(self, name: str) -> int:
        return self.params[SLOT[name]]

    def row(self) -> list:
        return [int(self.ctype), *self.params]

    def replace(self, **slots) -> "CadCommand":
        p = list(self.params)
        for k, v in slots.items():
            p[SLOT[k]] = int(v)
        return CadCommand(self.ctype, tuple(p))

    @property
    def is_curve(self) -> bool:
        return self.ctype in CURVES


def make_command(ctype: CommandType, **slots) -> CadCommand:
    p = [PAD] * N_PARAMS
    for k, v in slots.items():
        p[SLOT[k]] = int(v)
    return CadCommand(ctype, tuple(p))


def sol() -> CadCommand:
    return CadCommand(CommandType.SOL)


def eos() -> CadCommand:
    return CadCommand(CommandType.EOS)


def line(x: int, y: int) -> CadCommand:
    return make_command(CommandType.LINE, x=x, y=y)


def arc(x: int, y: int, theta: int, c: int) -> CadCommand:
    return make_command(CommandType.ARC, x=x, y=y, theta=theta, c=c)


def circle(x: int, y: int, r: int) -> CadCommand:
    return make_command(CommandType.CIRCLE, x=x, y=y, r=r)


def extrude(alpha=127, beta=127, gamma=127, o_x=127, o_y=127, o_z=127,
            s=127, d1=64, d2=0, b=JOIN, w=ONE_SIDED) -> CadCommand:
    # 127 is the quantized zero of the signed ranges; s=127 is unit scale
    return make_command(CommandType.EXTRUDE, alpha=alpha, beta=beta, gamma=gamma,
                        o_x=o_x, o_y=o_y, o_z=o_z, s=s, d1=d1, d2=d2, b=b, w=w)


@dataclass(frozen=True)
class CadSequence:
    """The non-EOS prefix of a construction sequence padded to ``max_len``.

    ``commands`` holds only the logical prefix; rows from ``logical_len`` on are
    EOS by construction.
    """

    commands: tuple
    max_len: int = MAX_LEN

    def __post_init__(self):
        object.__setattr__(self, "commands", tuple(self.commands))
        if len(self.commands) > self.max_len - 1:
            raise GrammarViolation(
                f"logical length {len(self.commands)} exceeds {self.max_len - 1}")

    @property
    def logical_len(self) -> int:
        return len(self.commands)

    def __len__(self) -> int:
        return len(self.commands)

    def __iter__(self):
        return iter(self.commands)

    def padded(self) -> list:
        return list(self.commands) + [eos()] * (self.max_len - len(self.commands))

    def count(self, ctype: CommandType) -> int:
        return sum(1 for c in self.commands if c.ctype == ctype)


@dataclass(frozen=True)
class SketchExtrudePair:
    loops: tuple          # each loop is a tuple of commands starting with SOL
    extrude: CadCommand

    def commands(self) -> list:
        out = []
        for lp in self.loops:
            out.extend(lp)
        out.append(self.extrude)
        return out

    def __len__(self) -> int:
        return sum(len(lp) for lp in self.loops) + 1


# ---------------------------------------------------------------------------
# row checks


def check_row(row: Sequence[int], index: int = 0) -> CadCommand:
    """Validate one matrix row against the slot pattern of its command type."""
    vals = [int(v) for v in row]
    if len(vals) != N_PARAMS + 1:
        raise MalformedRow(f"row {index}: expected 17 entries, got {len(vals)}")
    for v in vals:
        if v < PAD or v > N_BINS - 1:
            raise OutOfRange(f"row {index}: entry {v} outside [-1, 255]")
    t = vals[0]
    if not 0 <= t < N_COMMANDS:
        raise OutOfRange(f"row {index}: command index {t} outside [0, 5]")
    params = vals[1:]
    mask = SLOT_MASK[t]
    for j, p in enumerate(params):
        if mask[j]:
            if p == PAD:
                raise MalformedRow(
                    f"row {index}: {CommandType(t).name} slot {PARAM_NAMES[j]} unset")
            allowed = CATEGORICAL_SLOTS.get(j)
            if allowed is not None and p not in allowed:
                raise MalformedRow(
                    f"row {index}: slot {PARAM_NAMES[j]}={p} not in {allowed}")
        elif p != PAD:
            raise MalformedRow(
                f"row {index}: {CommandType(t).name} must leave slot {PARAM_NAMES[j]} at -1")
    return CadCommand(CommandType(t), tuple(params))


_CATEGORICAL_OK = {j: np.isin(np.arange(N_BINS), allowed)
                   for j, allowed in CATEGORICAL_SLOTS.items()}


def _first_bad_row(m: np.ndarray) -> int:
    """Index of the first row violating range or slot rules, or -1."""
    if not len(m):
        return -1
    bad = ((m < PAD) | (m > N_BINS - 1)).any(axis=1)
    t = m[:, 0]
    bad |= (t < 0) | (t >= N_COMMANDS)
    mask = SLOT_MASK[np.clip(t, 0, N_COMMANDS - 1)]
    params = m[:, 1:]
    bad |= ((mask & (params == PAD)) | (~mask & (params != PAD))).any(axis=1)
    for j, table in _CATEGORICAL_OK.items():
        bad |= mask[:, j] & ~table[np.clip(params[:, j], 0, N_BINS - 1)]
    hits = np.flatnonzero(bad)
    return int(hits[0]) if len(hits) else -1


def check_grammar(commands: Sequence[CadCommand]) -> None:
    """Raise GrammarViolation unless loops start with SOL and every Extrude
    follows at least one complete loop."""
    in_loop = False
    loop_has_curve = False
    complete_loops = 0
    for i, cmd in enumerate(commands):
        t = cmd.ctype
        if t == CommandType.SOL:
            if in_loop and not loop_has_curve:
                raise GrammarViolation(f"row {i}: empty loop before SOL")
            if in_loop:
                complete_loops += 1
            in_loop, loop_has_curve = True, False
        elif t in CURVES:
            if not in_loop:
                raise GrammarViolation(f"row {i}: curve outside a loop (missing SOL)")
            loop_has_curve = True
        elif t == CommandType.EXTRUDE:
            if in_loop:
                if not loop_has_curve:
                    raise GrammarViolation(f"row {i}: extrude after an empty loop")
                complete_loops += 1
            if complete_loops == 0:
                raise GrammarViolation(f"row {i}: extrude with no preceding loop")
            in_loop, loop_has_curve, complete_loops = False, False, 0
        elif t == CommandType.EOS:
            raise GrammarViolation(f"row {i}: EOS inside the logical prefix")


def parse_sequence(matrix, strict_padding: bool = True) -> CadSequence:
    """Parse an ``N x 17`` token matrix into a CadSequence.

    With ``strict_padding=False`` anything after the first EOS row is ignored
    instead of being required to be EOS (used for decoded model output).
    """
    m = np.asarray(matrix)
    if m.ndim != 2 or m.shape[1] != N_PARAMS + 1:
        raise MalformedRow(f"expected an N x 17 matrix, got shape {m.shape}")
    if m.size and not np.issubdtype(m.dtype, np.integer):
        if not np.all(np.equal(np.mod(m, 1), 0)):
            raise MalformedRow("matrix entries must be integers")
        m = m.astype(np.int64)
    n = m.shape[0]
    eos_rows = np.flatnonzero(m[:, 0] == CommandType.EOS)
    if len(eos_rows) == 0:
        if len(m) and (m.min() < PAD or m.max() > N_BINS - 1):
            raise OutOfRange("entry outside [-1, 255]")
        raise GrammarViolation("missing EOS")
    first = int(eos_rows[0])
    limit = n if strict_padding else first + 1
    bad = _first_bad_row(m[:limit])
    if bad >= 0:
        check_row(m[bad], bad)
        raise AssertionError("row check disagrees with the vectorized check")
    if strict_padding and (m[first:, 0] != CommandType.EOS).any():
        raise GrammarViolation("non-EOS command after the first EOS")
    prefix = [CadCommand._trusted(r[0], tuple(r[1:])) for r in m[:first].tolist()]
    check_grammar(prefix)
    return CadSequence(tuple(prefix), max_len=n)


def emit_matrix(seq: CadSequence) -> np.ndarray:
    m = np.full((seq.max_len, N_PARAMS + 1), PAD, dtype=np.int64)
    m[:, 0] = CommandType.EOS
    if seq.commands:
        m[:len(seq.commands)] = [c.row() for c in seq.commands]
    return m


def truncate_at_eos(matrix) -> np.ndarray:
    """Copy of ``matrix`` with every row after the first EOS forced to EOS."""
    m = np.array(matrix, dtype=np.int64, copy=True)
    eos_rows = np.flatnonzero(m[:, 0] == CommandType.EOS)
    if len(eos_rows):
        m[eos_rows[0]:, 0] = CommandType.EOS
        m[eos_rows[0]:, 1:] = PAD
    return m


def split_loops(commands: Sequence[CadCommand]) -> list:
    """Group a sketch span (SOL-delimited) into loops."""
    loops, cur = [], None
    for cmd in commands:
        if cmd.ctype == CommandType.SOL:
            if cur is not None:
                loops.append(tuple(cur))
            cur = [cmd]
        else:
            if cur is None:
                raise GrammarViolation("curve outside a loop (missing SOL)")
            cur.append(cmd)
    if cur is not None:
        loops.append(tuple(cur))
    return loops


def split_pairs(seq: CadSequence) -> list:
    pairs, span = [], []
    for cmd in seq.commands:
        if cmd.ctype == CommandType.EXTRUDE:
            loops = split_loops(span)
            if not loops:
                raise GrammarViolation("extrude with no preceding loop")
            pairs.append(SketchExtrudePair(tuple(loops), cmd))
            span = []
        else:
            span.append(cmd)
    if span:
        raise GrammarViolation("trailing loop without an extrude")
    return pairs


def join_pairs(pairs: Iterable[SketchExtrudePair], max_len: int = MAX_LEN) -> CadSequence:
    cmds = []
    for p in pairs:
        cmds.extend(p.commands())
    return CadSequence(tuple(cmds), max_len=max_len)


# ---------------------------------------------------------------------------
# structural validation


@dataclass
class ValidityReport:
    valid: bool
    rule: Optional[str] = None

    def to_json(self) -> str:
        return json.dumps({"valid": self.valid, "rule": self.rule})

    def __bool__(self) -> bool:
        return self.valid


def validate_structure(seq: CadSequence) -> ValidityReport:
    """Check grammar, extrusion depth and loop closure; report the first failure."""
    # local import: geometry depends on this module
    from cadseq.geometry import GeometryError, discretize_loop

    if seq.logical_len == 0:
        return ValidityReport(False, "empty sequence")
    try:
        check_grammar(seq.commands)
        pairs = split_pairs(seq)
    except GrammarViolation as e:
        return ValidityReport(False, f"grammar: {e}")
    for pair in pairs:
        e = pair.extrude
        if e["w"] == SYMMETRIC:
            if e["d1"] <= 0:
                return ValidityReport(False, "degenerate extrusion")
        elif e["d1"] + e["d2"] <= 0:
            return ValidityReport(False, "degenerate extrusion")
        for lp in pair.loops:
            try:
                discretize_loop(lp)
            except GeometryError as err:
                return ValidityReport(False, f"{type(err).__name__}: {err}")
    return ValidityReport(True, None)


# ---------------------------------------------------------------------------
# dataset files


@dataclass
class Record:
    id: str
    seq: CadSequence


def sequence_from_rows(rows, max_len: int = MAX_LEN) -> CadSequence:
    rows = [list(r) for r in rows]
    for i, r in enumerate(rows):
        if len(r) != N_PARAMS + 1:
            raise MalformedRow(f"row {i} has {len(r)} fields, expected {N_PARAMS + 1}")
    if len(rows) > max_len:
        raise MalformedRow(f"{len(rows)} rows exceed the maximum of {max_len}")
    pad = [[int(CommandType.EOS)] + [PAD] * N_PARAMS] * (max_len - len(rows))
    m = np.array(rows + pad, dtype=np.int64).reshape(max_len, N_PARAMS + 1)
    return parse_sequence(m)


def load_dataset(path, max_len: int = MAX_LEN) -> list:
    """Load ``[{"id": ..., "vec": [[17 ints], ...]}, ...]``."""
    with open(path) as f:
        data = json.load(f)
    if not isinstance(data, list):
        raise CadError("dataset file must hold a JSON list")
    out = []
    for rec in data:
        rid = str(rec.get("id"))
        try:
            out.append(Record(rid, sequence_from_rows(rec["vec"], max_len)))
        except (CadError, KeyError, TypeError) as e:
            raise CadError(f"record {rid}: {e}") from e
    return out


def dump_dataset(records: Iterable[Record], path) -> None:
    data = [{"id": r.id, "vec": [c.row() for c in r.seq.commands]} for r in records]
    with open(path, "w") as f:
        json.dump(data, f, separators=(",", ":"))
        f.write("\n")
