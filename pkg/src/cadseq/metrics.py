"""Reconstruction, latent-space, clustering and generation metrics."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from cadseq.cad_core import (
    CadError, CadSequence, CommandType, SLOT_MASK, emit_matrix, parse_sequence,
    split_pairs, validate_structure,
)
from cadseq.geometry import (
    DEFAULT_N_POINTS, DEFAULT_RESOLUTION, GeometryError, chamfer_distance, realize,
    sample_surface,
)


class NoMatchedCommands(ValueError):
    pass


class AllInvalid(ValueError):
    pass


class DuplicatePointsDegenerate(ValueError):
    pass


class SingleCluster(ValueError):
    pass


class EmptySet(ValueError):
    pass


class PatternNotFound(ValueError):
    pass


def _matrix(x) -> np.ndarray:
    return emit_matrix(x) if isinstance(x, CadSequence) else np.asarray(x)


# ---------------------------------------------------------------------------
# reconstruction accuracy


def acc_cmd(gt, pred, masked: bool = False) -> float:
    """Fraction of the N positions whose command type matches.

    ``masked`` restricts the count to rows up to and including the first
    ground-truth EOS.
    """
    g, p = _matrix(gt)[:, 0], _matrix(pred)[:, 0]
    if masked:
        first = int(np.flatnonzero(g == CommandType.EOS)[0])
        g, p = g[:first + 1], p[:first + 1]
    return float(np.mean(g == p))


def param_counts(gt, pred, eta: int = 3) -> tuple:
    """(correct slots, T) over rows with matching command type."""
    g, p = _matrix(gt), _matrix(pred)
    same = g[:, 0] == p[:, 0]
    used = SLOT_MASK[g[:, 0]] & same[:, None]
    close = np.abs(g[:, 1:] - p[:, 1:]) < eta
    return int((close & used).sum()), int(used.sum())


def acc_param(gt, pred, eta: int = 3) -> float:
    hit, total = param_counts(gt, pred, eta)
    if total == 0:
        raise NoMatchedCommands("no matched command carries parameters")
    return hit / total


def corpus_accuracy(gts, preds, eta: int = 3) -> tuple:
    """Mean per-sequence command accuracy and pooled parameter accuracy."""
    cmd = float(np.mean([acc_cmd(g, p) for g, p in zip(gts, preds)]))
    hit = total = 0
    for g, p in zip(gts, preds):
        h, t = param_counts(g, p, eta)
        hit, total = hit + h, total + t
    return cmd, (hit / total if total else float("nan"))


# ---------------------------------------------------------------------------
# validity and chamfer


def check_valid(seq_or_matrix, resolution: int = DEFAULT_RESOLUTION,
                n_points: int = DEFAULT_N_POINTS, seed: int = 0):
    """Return ``(valid, reason, cloud)`` for one sequence."""
    try:
        seq = seq_or_matrix if isinstance(seq_or_matrix, CadSequence) \
            else parse_sequence(seq_or_matrix)
    except CadError as e:
        return False, f"parse: {e}", None
    rep = validate_structure(seq)
    if not rep.valid:
        return False, rep.rule, None
    try:
        grid = realize(seq, resolution)
        cloud = sample_surface(grid, n_points, seed)
    except GeometryError as e:
        return False, str(e), None
    return True, None, cloud


def invalid_rate(seqs, resolution: int = DEFAULT_RESOLUTION) -> float:
    if not len(seqs):
        return 0.0
    bad = sum(1 for s in seqs if not check_valid(s, resolution, n_points=1)[0])
    return bad / len(seqs)


def median_cd(pairs, n_points: int = DEFAULT_N_POINTS, seed: int = 0,
              resolution: int = DEFAULT_RESOLUTION) -> tuple:
    """Median chamfer distance over valid ``(gt, pred)`` pairs.

    Returns ``(median, per_pair_cds, n_invalid)``; invalid pairs hold ``nan``.
    """
    cds = []
    for gt, pred in pairs:
        ok_g, _, cg = check_valid(gt, resolution, n_points, seed)
        ok_p, _, cp = check_valid(pred, resolution, n_points, seed)
        cds.append(chamfer_distance(cg, cp) if ok_g and ok_p else float("nan"))
    arr = np.array(cds, dtype=np.float64)
    valid = arr[~np.isnan(arr)]
    if len(valid) == 0:
        raise AllInvalid("no pair could be realized")
    return float(np.median(valid)), cds, int(np.isnan(arr).sum())


def length_breakdown(gts, preds, cds=None, eta: int = 3) -> list:
    """Per logical-length rows ``{length, acc_cmd, acc_param, median_cd, count}``."""
    by_len: dict = {}
    for i, (g, p) in enumerate(zip(gts, preds)):
        gm = _matrix(g)
        n = int(np.flatnonzero(gm[:, 0] == CommandType.EOS)[0])
        by_len.setdefault(n, []).append(i)
    rows = []
    for n in sorted(by_len):
        idx = by_len[n]
        c, pa = corpus_accuracy([gts[i] for i in idx], [preds[i] for i in idx], eta)
        med = float("nan")
        if cds is not None:
            vals = [cds[i] for i in idx if not math.isnan(cds[i])]
            med = float(np.median(vals)) if vals else float("nan")
        rows.append({"length": n, "acc_cmd": c, "acc_param": pa, "median_cd": med,
                     "count": len(idx)})
    return rows


# ---------------------------------------------------------------------------
# latent space


def cosine_similarity(u, v) -> float:
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ZeroDivisionError("cosine similarity of a zero vector")
    return float(u @ v / (nu * nv))


def euclidean_distance(u, v) -> float:
    d = np.asarray(u, dtype=np.float64) - np.asarray(v, dtype=np.float64)
    return math.sqrt(math.fsum(d * d))


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(-1)


def sse(Z, labels, centroids) -> float:
    Z, C = np.asarray(Z, dtype=np.float64), np.asarray(centroids, dtype=np.float64)
    d = Z - C[np.asarray(labels)]
    return math.fsum((d * d).ravel())


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    sse: float
    n_iter: int
    history: list = field(default_factory=list)


def _kmeans_pp(Z: np.ndarray, k: int, rng) -> np.ndarray:
    n = len(Z)
    centers = [Z[int(rng.integers(0, n))]]
    d2 = _sq_dists(Z, np.array(centers))[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(0, n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(Z[idx])
        d2 = np.minimum(d2, _sq_dists(Z, Z[idx:idx + 1])[:, 0])
    return np.array(centers)


def kmeans(Z, k: int, seed: int = 0, max_iter: int = 300) -> KMeansResult:
    """k-means++ seeding followed by Lloyd iterations until labels stop changing."""
    Z = np.asarray(Z, dtype=np.float64)
    n = len(Z)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    if len(np.unique(Z, axis=0)) < k:
        raise DuplicatePointsDegenerate(f"fewer than {k} distinct points")
    rng = np.random.default_rng(seed)
    C = _kmeans_pp(Z, k, rng)
    labels = _sq_dists(Z, C).argmin(1)
    history = [sse(Z, labels, C)]
    it = 0
    for it in range(1, max_iter + 1):
        newC = C.copy()
        for j in range(k):
            members = Z[labels == j]
            if len(members):
                newC[j] = members.mean(0)
        d = _sq_dists(Z, newC)
        new_labels = d.argmin(1)
        # reseed empty clusters at the point farthest from its centroid
        for j in range(k):
            if not np.any(new_labels == j):
                far = int(d[np.arange(n), new_labels].argmax())
                newC[j] = Z[far]
                d = _sq_dists(Z, newC)
                new_labels = d.argmin(1)
        cur = sse(Z, new_labels, newC)
        if cur > history[-1] * (1 + 1e-12) + 1e-12:
            raise AssertionError(f"SSE increased at iteration {it}: {history[-1]} -> {cur}")
        history.append(cur)
        converged = np.array_equal(new_labels, labels)
        C, labels = newC, new_labels
        if converged:
            break
    return KMeansResult(labels, C, history[-1], it, history)


def silhouette(Z, labels) -> float:
    """Mean silhouette coefficient; points in singleton clusters score 0.

    Per-cluster distance totals accumulate in point order, so a plain loop
    reproduces them bit for bit.
    """
    Z = np.asarray(Z, dtype=np.float64)
    ids, lab = np.unique(np.asarray(labels), return_inverse=True)
    if len(ids) < 2:
        raise SingleCluster("silhouette needs at least two clusters")
    counts = np.bincount(lab)
    scores = []
    for i in range(len(Z)):
        own = lab[i]
        if counts[own] == 1:
            scores.append(0.0)
            continue
        d = np.sqrt(_sq_dists(Z[i:i + 1], Z)[0])
        tot = np.bincount(lab, weights=d, minlength=len(ids))
        a = tot[own] / (counts[own] - 1)
        others = np.delete(tot / counts, own)
        b = float(others.min())
        m = max(a, b)
        scores.append(0.0 if m == 0 else (b - a) / m)
    return math.fsum(scores) / len(scores)


def cluster_sweep(Z, fractions=(0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5),
                  seed: int = 0) -> list:
    Z = np.asarray(Z, dtype=np.float64)
    rows = []
    for f in fractions:
        k = max(2, int(round(f * len(Z))))
        if k >= len(Z):
            continue
        res = kmeans(Z, k, seed)
        try:
            sc = silhouette(Z, res.labels)
        except SingleCluster:
            sc = float("nan")
        rows.append({"fraction": f, "k": k, "sc": sc, "sse": res.sse})
    return rows


# ---------------------------------------------------------------------------
# generation


def jsd(p, q) -> float:
    """Jensen-Shannon divergence (natural log) of two histograms."""
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    p = p / math.fsum(p.tolist())
    q = q / math.fsum(q.tolist())
    m = 0.5 * (p + q)

    def kl(a, b):
        nz = np.flatnonzero(a > 0)
        return math.fsum(a[i] * math.log(a[i] / b[i]) for i in nz.tolist())

    return max(0.0, 0.5 * kl(p, m) + 0.5 * kl(q, m))


def occupancy_histogram(grids, bins: int = 32) -> np.ndarray:
    """Occupied-voxel counts of every grid summed on a shared ``bins^3`` grid.

    Each grid is pooled to ``bins`` cells per axis by counting the occupied
    fine voxels that fall in every coarse cell.
    """
    h = np.zeros((bins,) * 3, dtype=np.float64)
    for g in grids:
        occ = np.asarray(getattr(g, "occupancy", g), dtype=bool)
        res = occ.shape[0]
        idx = np.argwhere(occ)
        cell = (idx * bins) // res
        np.add.at(h, (cell[:, 0], cell[:, 1], cell[:, 2]), 1.0)
    return h


def cd_matrix(gen_clouds, ref_clouds) -> np.ndarray:
    return np.array([[chamfer_distance(g, r) for r in ref_clouds] for g in gen_clouds])


def coverage_mmd(D: np.ndarray) -> tuple:
    """COV and MMD from a ``gen x ref`` chamfer matrix.

    COV: fraction of ref samples that are the nearest ref of some gen sample.
    MMD: mean over ref of the distance to its closest gen sample.
    """
    D = np.asarray(D, dtype=np.float64)
    matched = set(D.argmin(axis=1).tolist())
    cov = len(matched) / D.shape[1]
    mmd = math.fsum(D.min(axis=0).tolist()) / D.shape[1]
    return cov, mmd


def uniqueness(matrices) -> float:
    seen, unique = set(), 0
    for m in matrices:
        key = np.asarray(m, dtype=np.int64).tobytes()
        if key not in seen:
            unique += 1
            seen.add(key)
    return unique / len(matrices) if len(matrices) else 0.0


def generation_metrics(gen, ref, n_points: int = DEFAULT_N_POINTS, seed: int = 0,
                       resolution: int = DEFAULT_RESOLUTION, bins: int = 32) -> dict:
    if not len(gen) or not len(ref):
        raise EmptySet("generation metrics need non-empty sets")
    gen_m = [_matrix(g) for g in gen]
    ref_m = [_matrix(r) for r in ref]
    gen_ok = [x for x in (_realize_sample(m, resolution, n_points, seed) for m in gen_m) if x]
    ref_ok = [x for x in (_realize_sample(m, resolution, n_points, seed) for m in ref_m) if x]
    out = {"validity": len(gen_ok) / len(gen_m), "uniqueness": uniqueness(gen_m),
           "cov": float("nan"), "mmd": float("nan"), "jsd": float("nan")}
    if gen_ok and ref_ok:
        cov, mmd = coverage_mmd(cd_matrix([c for _, c in gen_ok], [c for _, c in ref_ok]))
        out.update(cov=cov, mmd=mmd, jsd=jsd(occupancy_histogram([g for g, _ in gen_ok], bins),
                                             occupancy_histogram([g for g, _ in ref_ok], bins)))
    return out


def _realize_sample(m, resolution: int, n_points: int, seed: int):
    """``(grid, cloud)`` for a valid sequence, else None."""
    try:
        seq = parse_sequence(m)
    except CadError:
        return None
    if not validate_structure(seq):
        return None
    try:
        grid = realize(seq, resolution)
        return grid, sample_surface(grid, n_points, seed)
    except GeometryError:
        return None


# ---------------------------------------------------------------------------
# permutation probes

PATTERNS = {
    "P1": (CommandType.SOL,) + (CommandType.LINE,) * 4,
    "P2": (CommandType.SOL,) + (CommandType.LINE,) * 6,
    "P3": (CommandType.SOL, CommandType.CIRCLE, CommandType.SOL, CommandType.CIRCLE),
}


def find_patterns(seq: CadSequence, pattern: str) -> list:
    """Indices of pairs whose loops match ``pattern`` exactly."""
    want = PATTERNS[pattern]
    hits = []
    for i, pair in enumerate(split_pairs(seq)):
        kinds = tuple(c.ctype for lp in pair.loops for c in lp)
        if kinds == want:
            hits.append(i)
    return hits


def permutation_probe(seq: CadSequence, pattern: str, rng, shift: Optional[int] = None,
                      pair_index: Optional[int] = None) -> CadSequence:
    """Re-order the commands of one matching pair without changing its shape.

    P1/P2: cyclic shift of the loop's lines by 1..len-1; P3: swap the two
    circle loops.
    """
    hits = find_patterns(seq, pattern)
    if not hits:
        raise PatternNotFound(f"{pattern} does not occur")
    pairs = split_pairs(seq)
    idx = hits[int(rng.integers(0, len(hits)))] if pair_index is None else pair_index
    pair = pairs[idx]
    if pattern == "P3":
        a, b = pair.loops
        if a == b:
            raise PatternNotFound("P3 loops are identical; swap would be a no-op")
        new_loops = (b, a)
    else:
        loop = pair.loops[0]
        curves = list(loop[1:])
        k = len(curves)
        s = int(rng.integers(1, k)) if shift is None else shift
        if not 1 <= s < k:
            raise ValueError(f"shift {s} outside [1, {k - 1}]")
        new_loops = ((loop[0], *curves[s:], *curves[:s]),)
    pairs[idx] = type(pair)(new_loops, pair.extrude)
    cmds = []
    for p in pairs:
        cmds.extend(p.commands())
    return CadSequence(tuple(cmds), seq.max_len)


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    acc_cmd: float = float("nan")
    acc_param: float = float("nan")
    invalid_rate: float = float("nan")
    median_cd: float = float("nan")
    n_invalid_pairs: int = 0
    count: int = 0
    per_length: list = field(default_factory=list)
    generation: Optional[dict] = None
    clustering: Optional[list] = None
    permutation: Optional[dict] = None

    FIELDS = ("acc_cmd", "acc_param", "invalid_rate", "median_cd", "n_invalid_pairs",
              "count", "per_length", "generation", "clustering", "permutation")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.FIELDS}

    def to_json(self) -> str:
        return json.dumps(_clean(self.to_dict()), indent=1, sort_keys=True)

    def write_length_csv(self, path) -> None:
        write_csv(path, self.per_length, ["length", "acc_cmd", "acc_param", "median_cd", "count"])


def write_csv(path, rows, columns) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({c: r.get(c) for c in columns})


def _clean(x):
    """NaN and inf become null so the JSON stays standard."""
    if isinstance(x, float):
        return x if math.isfinite(x) else None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.generic):
        return _clean(x.item())
    return x
