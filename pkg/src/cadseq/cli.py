"""``cadseq`` command-line entry point."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from cadseq import cad_core
from cadseq.cad_core import CadError, CommandType, Record, dump_dataset, emit_matrix, load_dataset
from cadseq.config import ConfigError, RunConfig, load_config

log = logging.getLogger("cadseq")

EXIT_OK, EXIT_FAIL, EXIT_INVALID = 0, 1, 2

SPLITS = ("train", "val", "test")


def split_of(record_id: str) -> str:
    """Deterministic 90/5/5 assignment from the id hash."""
    h = int(hashlib.sha256(record_id.encode()).hexdigest()[:8], 16) % 100
    return "train" if h < 90 else "val" if h < 95 else "test"


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, indent=1, sort_keys=True)
        f.write("\n")


def _out(args, default: str) -> Path:
    return Path(args.out) if args.out else Path(default)


def _dataset_path(args, cfg: RunConfig) -> str:
    path = getattr(args, "dataset", None) or cfg.paths.dataset
    if not path:
        raise ConfigError("no dataset given (use --dataset or paths.dataset)")
    return path


def _matrices(records) -> np.ndarray:
    return np.stack([emit_matrix(r.seq) for r in records])


def _select(records, split: str):
    if split == "all":
        return list(records)
    return [r for r in records if split_of(r.id) == split]


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, cfg: RunConfig) -> int:
    from cadseq.synth import SynthConfig, synth_corpus

    scfg = SynthConfig(max_pairs=args.max_pairs, max_len=args.max_len)
    recs = synth_corpus(args.count, args.seed, scfg)
    out = _out(args, "synth.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    dump_dataset(recs, out)
    log.info("wrote %d sequences to %s", len(recs), out)
    return EXIT_OK


def dataset_summary(records) -> dict:
    from cadseq.rre import line_arc_stats

    if not records:
        raise CadError("dataset is empty")
    seqs = [r.seq for r in records]
    n = len(seqs)
    kinds = {}
    for name, w in (("one_sided", 0), ("symmetric", 1), ("two_sided", 2)):
        kinds[name] = sum(1 for s in seqs if any(
            c.ctype == CommandType.EXTRUDE and c["w"] == w for c in s.commands)) / n
    assignment = {r.id: split_of(r.id) for r in records}
    counts = {k: sum(1 for v in assignment.values() if v == k) for k in SPLITS}
    lengths = [s.logical_len for s in seqs]
    return {"count": n, "contains": line_arc_stats(seqs), "extrude_types": kinds,
            "split_counts": counts, "split": assignment,
            "length": {"min": min(lengths), "max": max(lengths),
                       "mean": float(np.mean(lengths))}}


def cmd_ingest(args, cfg: RunConfig) -> int:
    records = load_dataset(_dataset_path(args, cfg), cfg.model.max_len)
    summary = dataset_summary(records)
    _write_json(_out(args, "summary.json"), summary)
    return EXIT_OK


def cmd_augment(args, cfg: RunConfig) -> int:
    from cadseq.rre import augment_batch

    records = load_dataset(_dataset_path(args, cfg), cfg.model.max_len)
    rng = np.random.default_rng(cfg.rre.seed)
    out_seqs = augment_batch([r.seq for r in records], cfg.rre, rng)
    dump_dataset([Record(f"{r.id}-rre", s) for r, s in zip(records, out_seqs)],
                 _out(args, "augmented.json"))
    return EXIT_OK


def cmd_train_ae(args, cfg: RunConfig) -> int:
    from cadseq.metrics import corpus_accuracy
    from cadseq.rre import augment_batch
    from cadseq.training import (
        TrainState, load_checkpoint, reconstruct, save_checkpoint, train_step,
    )

    if args.no_contrastive:
        if args.kappa is not None and args.kappa > 0:
            raise ConfigError("--no-contrastive conflicts with --kappa > 0")
        cfg.train.kappa = 0.0
    elif args.kappa is not None:
        cfg.train.kappa = args.kappa
    records = load_dataset(_dataset_path(args, cfg), cfg.model.max_len)
    train = _select(records, args.split)
    val = _select(records, "val") if args.split == "train" else train
    if not train:
        raise CadError("training split is empty")
    X = _matrices(train)
    Xv = _matrices(val) if val else None

    start_epoch = 0
    if args.resume:
        state, tcfg, meta = load_checkpoint(args.resume)
        if args.no_contrastive:
            tcfg.kappa = 0.0
        cfg.train = tcfg
        start_epoch = int(meta.get("epoch", 0))
    else:
        state = TrainState.create(cfg.model, cfg.train)
    tcfg = cfg.train
    seqs = [r.seq for r in train]
    if args.rre and not args.rre_online:
        seqs = augment_batch(seqs, cfg.rre, np.random.default_rng(cfg.rre.seed))
        X = np.stack([emit_matrix(s) for s in seqs])

    ckpt_dir = Path(args.out or cfg.paths.checkpoints)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    columns = ["epoch", "step", "l_rec"] + (["l_cont"] if tcfg.kappa > 0 else []) \
        + ["val_acc_cmd", "val_acc_param"]
    log_path = ckpt_dir / "train_log.csv"
    mode = "a" if args.resume and log_path.exists() else "w"
    if mode == "a":
        with open(log_path, newline="") as f:
            columns = next(csv.reader(f))
    epochs = args.epochs if args.epochs is not None else tcfg.epochs
    with open(log_path, mode, newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns, restval="")
        if mode == "w":
            writer.writeheader()
        epoch = start_epoch
        for epoch in range(start_epoch + 1, start_epoch + epochs + 1):
            # per-epoch streams keep resumed runs identical to uninterrupted ones
            order = np.random.default_rng([tcfg.seed, epoch]).permutation(len(X))
            aug_rng = np.random.default_rng([cfg.rre.seed, epoch])
            sums = {"l_rec": 0.0, "l_cont": 0.0}
            nb = 0
            for s in range(0, len(order), tcfg.batch_size):
                idx = order[s:s + tcfg.batch_size]
                if args.rre and args.rre_online:
                    batch_seqs = augment_batch([seqs[i] for i in idx], cfg.rre, aug_rng)
                    batch = np.stack([emit_matrix(q) for q in batch_seqs])
                else:
                    batch = X[idx]
                res = train_step(batch, tcfg, state)
                sums["l_rec"] += res["l_rec"]
                sums["l_cont"] += res.get("l_cont", 0.0)
                nb += 1
                if args.max_steps and state.step >= args.max_steps:
                    break
            row = {"epoch": epoch, "step": state.step, "l_rec": sums["l_rec"] / nb}
            if tcfg.kappa > 0:
                row["l_cont"] = sums["l_cont"] / nb
            if Xv is not None:
                a_cmd, a_par = corpus_accuracy(list(Xv), list(reconstruct(state.model, Xv)),
                                               tcfg.eta)
                row.update(val_acc_cmd=a_cmd, val_acc_param=a_par)
            writer.writerow(row)
            f.flush()
            if args.max_steps and state.step >= args.max_steps:
                break
    save_checkpoint(ckpt_dir / "model", state, tcfg, {"epoch": epoch})
    log.info("saved checkpoint at step %d to %s", state.step, ckpt_dir / "model")
    return EXIT_OK


def _load_model(path):
    from cadseq.training import load_checkpoint

    state, tcfg, meta = load_checkpoint(path, with_optimizer=False)
    state.model.eval()
    return state.model, tcfg


def cmd_encode(args, cfg: RunConfig) -> int:
    from cadseq.training import encode_all

    model, _ = _load_model(args.checkpoint)
    records = load_dataset(_dataset_path(args, cfg), model.cfg.max_len)
    Z = encode_all(model, _matrices(records))
    _write_json(_out(args, "latents.json"),
                {"ids": [r.id for r in records], "latents": Z.tolist()})
    return EXIT_OK


def cmd_decode(args, cfg: RunConfig) -> int:
    from cadseq.model import logits_to_matrix

    model, _ = _load_model(args.checkpoint)
    with open(args.latents) as f:
        data = json.load(f)
    z = torch.tensor(data["latents"], dtype=torch.float32)
    with torch.no_grad():
        mats = logits_to_matrix(*model.decode(z)).numpy()
    _write_json(_out(args, "decoded.json"), _matrix_records(data.get("ids"), mats))
    return EXIT_OK


def _matrix_records(ids, mats):
    """Dataset-format records for raw decoded matrices (prefix before the first EOS)."""
    out = []
    for i, m in enumerate(mats):
        eos = np.flatnonzero(m[:, 0] == CommandType.EOS)
        first = int(eos[0]) if len(eos) else len(m)
        rid = ids[i] if ids else f"gen-{i:06d}"
        out.append({"id": rid, "vec": m[:first].astype(int).tolist()})
    return out


def cmd_train_gan(args, cfg: RunConfig) -> int:
    from cadseq.latent_gan import save_gan, train_gan
    from cadseq.training import encode_all

    model, _ = _load_model(args.checkpoint)
    records = load_dataset(_dataset_path(args, cfg), model.cfg.max_len)
    records = _select(records, args.split)
    Z = encode_all(model, _matrices(records))
    cfg.gan.latent_dim = model.cfg.d_model
    if args.iterations is not None:
        cfg.gan.iterations = args.iterations
    G, D, hist = train_gan(Z, cfg.gan)
    out = Path(args.out or cfg.paths.checkpoints)
    out.mkdir(parents=True, exist_ok=True)
    save_gan(out / "gan", G, D, cfg.gan)
    with open(out / "gan_log.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "wasserstein"])
        for i, v in enumerate(hist):
            w.writerow([i, repr(v)])
    return EXIT_OK


def cmd_generate(args, cfg: RunConfig) -> int:
    from cadseq.latent_gan import generate_sequences, load_gan

    model, _ = _load_model(args.checkpoint)
    G, _, gcfg, _ = load_gan(args.gan)
    res = generate_sequences(args.n, G, model, args.seed)
    recs = _matrix_records(None, [m for m, _ in res])
    for r, (_, ok) in zip(recs, res):
        r["valid"] = bool(ok)
    _write_json(_out(args, "generated.json"), recs)
    return EXIT_OK


def cmd_eval_recon(args, cfg: RunConfig) -> int:
    from cadseq.metrics import (
        AllInvalid, MetricsReport, corpus_accuracy, invalid_rate, length_breakdown, median_cd,
    )
    from cadseq.training import reconstruct

    model, tcfg = _load_model(args.checkpoint)
    records = _select(load_dataset(_dataset_path(args, cfg), model.cfg.max_len), args.split)
    if not records:
        raise CadError(f"split {args.split} is empty")
    X = _matrices(records)
    P = reconstruct(model, X)
    g = cfg.geometry
    rep = MetricsReport(count=len(X))
    rep.acc_cmd, rep.acc_param = corpus_accuracy(list(X), list(P), tcfg.eta)
    rep.invalid_rate = invalid_rate(list(P), g.resolution)
    failure = None
    try:
        med, cds, n_bad = median_cd(list(zip(X, P)), g.n_points, cfg.seed, g.resolution)
    except AllInvalid as e:
        # accuracies are still worth keeping; the exit code reports the failure
        failure, med, cds, n_bad = e, float("nan"), None, len(X)
    rep.median_cd, rep.n_invalid_pairs = med, n_bad
    rep.per_length = length_breakdown(list(X), list(P), cds, tcfg.eta)
    out = _out(args, "recon_report.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(rep.to_json() + "\n")
    rep.write_length_csv(out.with_suffix(".csv"))
    if failure is not None:
        raise failure
    return EXIT_OK


def _load_matrices(path, max_len: int):
    with open(path) as f:
        data = json.load(f)
    mats = []
    for rec in data:
        rows = list(rec["vec"])[:max_len]
        pad = [[int(CommandType.EOS)] + [-1] * 16] * (max_len - len(rows))
        mats.append(np.array(rows + pad, dtype=np.int64).reshape(max_len, 17))
    return mats


def cmd_eval_gen(args, cfg: RunConfig) -> int:
    from cadseq.metrics import MetricsReport, generation_metrics

    max_len = cfg.model.max_len
    gen = _load_matrices(args.generated, max_len)
    ref_records = _select(load_dataset(_dataset_path(args, cfg), max_len), args.split)
    ref = [emit_matrix(r.seq) for r in ref_records]
    g = cfg.geometry
    block = generation_metrics(gen, ref, g.n_points, cfg.seed, g.resolution)
    rep = MetricsReport(count=len(gen), generation=block)
    _out(args, "gen_report.json").write_text(rep.to_json() + "\n")
    return EXIT_OK


def cmd_cluster(args, cfg: RunConfig) -> int:
    from cadseq.metrics import MetricsReport, cluster_sweep, write_csv
    from cadseq.training import encode_all

    model, _ = _load_model(args.checkpoint)
    records = _select(load_dataset(_dataset_path(args, cfg), model.cfg.max_len), args.split)
    Z = encode_all(model, _matrices(records))
    rows = cluster_sweep(Z, seed=cfg.seed)
    out = _out(args, "cluster_report.json")
    rep = MetricsReport(count=len(Z), clustering=rows)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(rep.to_json() + "\n")
    write_csv(out.with_suffix(".csv"), rows, ["fraction", "k", "sc", "sse"])
    return EXIT_OK


def permutation_pairs(records, rng, patterns=("P1", "P2", "P3")):
    """Every (original, permuted, pattern) probe found in ``records``."""
    from cadseq.metrics import PatternNotFound, find_patterns, permutation_probe

    out = []
    for r in records:
        for pat in patterns:
            for idx in find_patterns(r.seq, pat):
                try:
                    q = permutation_probe(r.seq, pat, rng, pair_index=idx)
                except PatternNotFound:
                    continue
                out.append((r.seq, q, pat))
    return out


def cmd_perm_test(args, cfg: RunConfig) -> int:
    from cadseq.metrics import (
        MetricsReport, PatternNotFound, cosine_similarity, euclidean_distance,
    )
    from cadseq.training import encode_all

    model, _ = _load_model(args.checkpoint)
    records = _select(load_dataset(_dataset_path(args, cfg), model.cfg.max_len), args.split)
    probes = permutation_pairs(records, np.random.default_rng(cfg.seed))
    if not probes:
        raise PatternNotFound("no P1/P2/P3 pattern in the corpus")
    zo = encode_all(model, np.stack([emit_matrix(a) for a, _, _ in probes]))
    zp = encode_all(model, np.stack([emit_matrix(b) for _, b, _ in probes]))
    sims = [cosine_similarity(a, b) for a, b in zip(zo, zp)]
    eds = [euclidean_distance(a, b) for a, b in zip(zo, zp)]
    by_pat = {}
    for (_, _, pat), s, e in zip(probes, sims, eds):
        by_pat.setdefault(pat, {"sim": [], "ed": []})
        by_pat[pat]["sim"].append(s)
        by_pat[pat]["ed"].append(e)
    block = {"count": len(probes), "sim": float(np.mean(sims)), "ed": float(np.mean(eds)),
             "per_pattern": {k: {"count": len(v["sim"]), "sim": float(np.mean(v["sim"])),
                                 "ed": float(np.mean(v["ed"]))} for k, v in sorted(by_pat.items())}}
    rep = MetricsReport(count=len(probes), permutation=block)
    _out(args, "perm_report.json").write_text(rep.to_json() + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (JSON)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cadseq", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, **kw):
        sp = sub.add_parser(name, parents=[common], **kw)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("synth", cmd_synth, help="write a synthetic dataset")
    sp.add_argument("--count", type=int, default=1000)
    sp.add_argument("--max-pairs", type=int, default=3)
    sp.add_argument("--max-len", type=int, default=cad_core.MAX_LEN)

    sp = add("ingest", cmd_ingest, help="validate a dataset and summarize it")
    sp.add_argument("dataset", nargs="?")

    sp = add("augment", cmd_augment, help="apply RRE once to every sequence")
    sp.add_argument("dataset", nargs="?")

    sp = add("train-ae", cmd_train_ae, help="train the autoencoder")
    sp.add_argument("--dataset")
    sp.add_argument("--rre", action="store_true", help="augment training data with RRE")
    sp.add_argument("--rre-online", dest="rre_online", action="store_true", default=True)
    sp.add_argument("--rre-offline", dest="rre_online", action="store_false")
    sp.add_argument("--no-contrastive", action="store_true", help="kappa = 0")
    sp.add_argument("--kappa", type=float)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--max-steps", type=int)
    sp.add_argument("--split", choices=("train", "all"), default="train")
    sp.add_argument("--resume", help="checkpoint to continue from")

    for name, fn, text in (
            ("encode", cmd_encode, "write latent vectors of a dataset"),
            ("cluster", cmd_cluster, "K-means sweep over latents (SC and SSE)"),
            ("perm-test", cmd_perm_test, "latent similarity under command permutations"),
            ("eval-recon", cmd_eval_recon, "reconstruction accuracy, invalid rate and CD")):
        sp = add(name, fn, help=text)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--dataset")
        if name != "encode":
            sp.add_argument("--split", choices=("train", "val", "test", "all"), default="test")

    sp = add("decode", cmd_decode, help="decode latents to sequences")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--latents", required=True)

    sp = add("train-gan", cmd_train_gan, help="train the latent GAN")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset")
    sp.add_argument("--split", choices=("train", "all"), default="train")
    sp.add_argument("--iterations", type=int)

    sp = add("generate", cmd_generate, help="sample sequences from the latent GAN")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--gan", required=True)
    sp.add_argument("-n", type=int, default=100)

    sp = add("eval-gen", cmd_eval_gen, help="generation metrics against a reference set")
    sp.add_argument("--generated", required=True)
    sp.add_argument("--dataset")
    sp.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
            cfg.propagate_seed()
        args.seed = cfg.seed
        torch.manual_seed(cfg.seed)
        return args.fn(args, cfg)
    except (CadError, ConfigError, ValueError) as e:
        print(f"cadseq {args.command}: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001
        print(f"cadseq {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
