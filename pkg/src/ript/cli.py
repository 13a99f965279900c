"""Command-line entry point: synth, train, extract, eval, check-invariance.

Exit codes: 0 success, 1 invariance gate failed, 2 configuration or argument
error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import eval as ev
from . import geometry, io, synth
from .autodiff import no_grad
from .config import DTYPES, RunConfig, from_dict, load_config
from .errors import ConfigError, DegenerateGeometryError, FormatError, InsufficientPointsError, NumericError
from .sdmm.train import DistillConfig, DistillState, teacher_encoder_arrays, train_epoch
from .sdmm.views import resample
from .tokenizer import TokenizerConfig
from .transformer import RIPT, TransformerConfig

log = logging.getLogger("ript")

EXIT_OK, EXIT_GATE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4
METRIC_FIELDS = ("epoch", "loss", "teacher_entropy", "lr", "lambda")


class DataError(Exception):
    pass


def _workers(args):
    if getattr(args, "workers", None):
        return args.workers
    env = os.environ.get("RIPT_WORKERS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError("RIPT_WORKERS", f"expected an integer, got {env!r}") from None
        if n < 1:
            raise ConfigError("RIPT_WORKERS", "must be positive")
        return n
    return None


def _streams(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


# ---------------------------------------------------------------------------
# datasets


def load_sets(manifest, n_points, rng, rotation="Nr"):
    """Pose-normalized sets listed in a manifest, resampled to ``n_points``.

    With ``rotation="Rr"`` each set also gets an independent random rotation.
    """
    manifest = Path(manifest)
    if not manifest.is_file():
        raise DataError(f"manifest not found: {manifest}")
    entries = geometry.read_manifest(manifest)
    if not entries:
        raise DataError(f"manifest lists no point sets: {manifest}")
    sets = []
    for path, label in entries:
        if not Path(path).is_file():
            raise DataError(f"point set not found: {path}")
        ps = geometry.load_point_set(path, n_points=n_points, seed=int(rng.integers(2**31)), label=label)
        if len(ps) != n_points:
            ps = resample(ps, n_points, rng)
        ps = geometry.normalize_pose(ps)
        if rotation == "Rr":
            ps = geometry.apply_rotation(ps, geometry.random_rotation(rng))
        sets.append(ps)
    return sets


# ---------------------------------------------------------------------------
# model checkpoints


def encoder_meta(tok_cfg, tr_cfg, **extra):
    return {"kind": "encoder", "tokenizer": asdict(tok_cfg), "transformer": asdict(tr_cfg), **extra}


def build_encoder(meta, dtype=np.float64, seed=0):
    try:
        tok_cfg = TokenizerConfig(**meta["tokenizer"])
        tr_cfg = TransformerConfig(**meta["transformer"])
    except (KeyError, TypeError) as exc:
        raise ConfigError("checkpoint", f"missing or malformed model settings ({exc})") from None
    return RIPT(tok_cfg, tr_cfg, np.random.default_rng(seed), dtype)


def load_encoder(path, dtype=np.float64):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    tensors, meta = io.load_checkpoint(path)
    if meta.get("kind") == "distill_state":
        # full trainer state: pick the teacher's encoder
        tensors = {k[len("teacher.encoder."):]: v for k, v in tensors.items() if k.startswith("teacher.encoder.")}
    model = build_encoder(meta, dtype)
    try:
        model.load_state_dict(tensors)
    except (KeyError, ValueError) as exc:
        raise ConfigError("checkpoint", f"tensors do not match the model settings: {exc}") from None
    return model, meta


def encode_sets(model, sets, batch=32):
    out = []
    with no_grad():
        for s in range(0, len(sets), batch):
            descs = [model.describe(ps, 0) for ps in sets[s : s + batch]]
            out.append(model.encode(descs, training=False).data)
    return np.concatenate(out).astype(np.float64) if out else np.zeros((0, model.tr_cfg.latent))


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    classes = args.classes
    for c in classes:
        if c not in synth.SHAPES:
            raise ConfigError("classes", f"unknown shape class {c!r} (choose from {', '.join(synth.SHAPES)})")
    if args.per_class < 1 or args.n_points < 1 or args.test_per_class < 0:
        raise ConfigError("per_class", "counts must be positive")
    out = Path(args.out_dir)
    (out / "shapes").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    train, test = [], []
    for c in classes:
        for i in range(args.per_class + args.test_per_class):
            ps = synth.sample_shape(c, args.n_points, rng)
            rel = Path("shapes") / f"{c}_{i:04d}.xyzn"
            geometry.write_xyzn(out / rel, ps)
            (train if i < args.per_class else test).append((rel, c))
    geometry.write_manifest(out / "manifest.tsv", train + test)
    if args.test_per_class:
        geometry.write_manifest(out / "train.tsv", train)
        geometry.write_manifest(out / "test.tsv", test)
    print(f"wrote {len(train) + len(test)} point sets to {out}")
    return EXIT_OK


def _write_metrics(path, rows, append):
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        if not append:
            w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def run_training(cfg: RunConfig, resume=None, workers=None, log_every=1):
    """Train per ``cfg``; returns the output directory."""
    dtype = cfg.run.np_dtype
    manifest = cfg.resolve(cfg.data.train_manifest)
    if manifest is None:
        raise ConfigError("data.train_manifest", "a training manifest is required")
    out = cfg.resolve(cfg.run.out_dir)
    init_rng, data_rng, train_rng = _streams(cfg.run.seed, 3)
    dataset = load_sets(manifest, cfg.data.n_points, data_rng, cfg.data.train_rotation)
    if len(dataset) < cfg.sdmm.batch_size:
        raise DataError(f"{len(dataset)} training sets, fewer than the minibatch size {cfg.sdmm.batch_size}")
    state = DistillState(cfg.tokenizer, cfg.transformer, cfg.sdmm, init_rng, dtype)
    metrics_path = out / "metrics.csv"
    if resume is not None:
        tensors, meta = io.load_checkpoint(resume)
        if meta.get("kind") != "distill_state":
            raise ConfigError("resume", f"{resume} is not a trainer checkpoint")
        try:
            state.load_arrays(tensors)
        except (KeyError, ValueError) as exc:
            raise ConfigError("resume", f"checkpoint does not match the config: {exc}") from None
        state.step, state.epoch = meta["step"], meta["epoch"]
        train_rng.bit_generator.state = meta["rng"]
        _truncate_metrics(metrics_path, state.epoch)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    workers = workers or cfg.run.workers
    while state.epoch < cfg.sdmm.epochs:
        m = train_epoch(dataset, state, train_rng, workers, snapshot_path=out / "nonfinite.ckpt")
        _write_metrics(metrics_path, [m.row()], append=m.epoch > 0)
        if log_every and (m.epoch % log_every == 0 or state.epoch == cfg.sdmm.epochs):
            log.info("epoch %d loss %.4f teacher entropy %.4f lr %.3g", m.epoch, m.loss, m.teacher_entropy, m.lr)
        if state.epoch % cfg.run.checkpoint_every == 0 or state.epoch == cfg.sdmm.epochs:
            meta = state.meta()
            meta["rng"] = train_rng.bit_generator.state
            io.save_checkpoint(out / "last.ckpt", state.arrays(), meta)
    extra = {"train_rotation": cfg.data.train_rotation, "epochs": state.epoch, "seed": cfg.run.seed}
    io.save_checkpoint(out / "final.ckpt", teacher_encoder_arrays(state), encoder_meta(cfg.tokenizer, cfg.transformer, **extra))
    return out


def _truncate_metrics(path, epochs):
    if not path.exists():
        return
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))[:epochs]
    _write_metrics(path, [], append=False)
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        w.writerows(rows)


def cmd_train(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.out_dir is not None:
        cfg.run.out_dir = str(Path(args.out_dir).resolve())
    cfg.validate()
    out = run_training(cfg, resume=args.resume, workers=_workers(args))
    print(f"final teacher encoder: {out / 'final.ckpt'}")
    return EXIT_OK


def _dtype_arg(args, meta_default="float64"):
    name = args.dtype or meta_default
    if name not in DTYPES:
        raise ConfigError("dtype", f"must be one of {sorted(DTYPES)}")
    return DTYPES[name]


def cmd_extract(args):
    dtype = _dtype_arg(args)
    model, meta = load_encoder(args.checkpoint, dtype)
    if args.config is not None:
        cfg = load_config(args.config)
        if asdict(cfg.tokenizer) != meta["tokenizer"] or asdict(cfg.transformer) != meta["transformer"]:
            raise ConfigError("config", "model settings differ from those stored in the checkpoint")
    rng_data, rng_rot = _streams(args.seed, 2)
    sets = load_sets(args.manifest, args.n_points, rng_data)
    if args.rotation == "Rr":
        sets = ev.rotate_sets(sets, rng_rot)
    feats = encode_sets(model, sets)
    if not np.all(np.isfinite(feats)):
        raise NumericError("non-finite features")
    io.write_features(args.out, feats, [ps.label for ps in sets])
    if args.tokens_dir:
        tdir = Path(args.tokens_dir)
        tdir.mkdir(parents=True, exist_ok=True)
        with no_grad(), open(tdir / "tokens.bin", "wb") as fh:
            for ps in sets:
                d = model.describe(ps, 0)
                io.write_token_set(fh, d.token_points, model.tokenizer.project(d.descriptors).data)
    print(f"wrote {len(feats)} x {feats.shape[1]} features to {args.out}")
    return EXIT_OK


def _read_table(path, split):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"feature file not found: {path}")
    feats, labels = io.read_features(path)
    if labels is None:
        raise DataError(f"no labels for {path} (expected {io.labels_path(path)})")
    return ev.FeatureTable(feats, labels, split)


def cmd_eval(args):
    test = _read_table(args.test, "test")
    train = _read_table(args.train, "train") if args.train else None
    tasks = ("retrieval", "probe", "cluster") if args.task == "all" else (args.task,)
    if "probe" in tasks and train is None:
        raise ConfigError("train", "the probe task needs --train features")
    if train is not None:
        if train.features.shape[1] != test.features.shape[1]:
            raise DataError("train and test features differ in width")
        missing = sorted(set(test.labels) - set(train.labels))
        if missing:
            raise DataError(f"test labels absent from the training features: {missing}")
    metrics = ev.evaluate(train, test, tasks, seed=args.seed)
    for k, v in metrics.items():
        print(f"{k}: {v:.4f}")
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            w.writerows([k, repr(v)] for k, v in metrics.items())
    return EXIT_OK


def invariance_report(model, sets, trials, rng):
    """Per-set minimum cosine between latent(P) and latent(P R) over random R."""
    base = encode_sets(model, sets)
    worst = np.full(len(sets), np.inf)
    for _ in range(trials):
        rotated = [geometry.apply_rotation(ps, geometry.random_rotation(rng)) for ps in sets]
        z = encode_sets(model, rotated)
        cos = np.einsum("ij,ij->i", base, z) / (np.linalg.norm(base, axis=1) * np.linalg.norm(z, axis=1))
        worst = np.minimum(worst, cos)
    return worst


def cmd_check_invariance(args):
    if args.trials < 1:
        raise ConfigError("trials", f"must be at least 1, got {args.trials}")
    if (args.checkpoint is None) == (args.config is None):
        raise ConfigError("checkpoint", "give exactly one of --checkpoint or --config")
    threshold = args.threshold
    if args.checkpoint is not None:
        model, _ = load_encoder(args.checkpoint, _dtype_arg(args))
    else:
        cfg = load_config(args.config)
        dtype = _dtype_arg(args, cfg.run.dtype)
        model = RIPT(cfg.tokenizer, cfg.transformer, _streams(cfg.run.seed, 1)[0], dtype)
        if threshold is None:
            threshold = cfg.run.invariance_threshold
    if threshold is None:
        threshold = 1.0 - 1e-3
    rng_data, rng_rot = _streams(args.seed, 2)
    sets = load_sets(args.manifest, args.n_points, rng_data)
    worst = invariance_report(model, sets, args.trials, rng_rot)
    ok = bool(worst.min() >= threshold)
    print(f"sets: {len(sets)}  trials: {args.trials}  threshold: {threshold!r}")
    print(f"min cosine: {worst.min()!r}  mean of per-set minima: {worst.mean()!r}")
    print("PASS" if ok else f"FAIL: {int((worst < threshold).sum())} set(s) below threshold")
    return EXIT_OK if ok else EXIT_GATE


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="ript", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic oriented point set dataset")
    s.add_argument("--classes", nargs="+", default=["sphere", "box", "cylinder", "torus"])
    s.add_argument("--per-class", type=int, default=50)
    s.add_argument("--test-per-class", type=int, default=0, help="extra sets per class listed in test.tsv")
    s.add_argument("--n-points", type=int, default=1024)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="self-distillation training from a TOML config")
    s.add_argument("config")
    s.add_argument("--resume", help="trainer checkpoint (last.ckpt) to continue from")
    s.add_argument("--seed", type=int)
    s.add_argument("--out-dir")
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("extract", help="write latent features for a manifest")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--rotation", choices=["Nr", "Rr"], default="Nr")
    s.add_argument("--n-points", type=int, default=1024)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dtype", choices=sorted(DTYPES))
    s.add_argument("--config", help="optional config whose model settings must match the checkpoint")
    s.add_argument("--tokens-dir", help="also write the input token sets here")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("eval", help="retrieval / probe / clustering metrics from feature files")
    s.add_argument("--test", required=True)
    s.add_argument("--train")
    s.add_argument("--task", choices=["retrieval", "probe", "cluster", "all"], default="retrieval")
    s.add_argument("--out", help="metrics CSV path")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("check-invariance", help="latent cosine between sets and their random rotations")
    s.add_argument("--checkpoint")
    s.add_argument("--config", help="randomly initialized model from this config instead of a checkpoint")
    s.add_argument("--manifest", required=True)
    s.add_argument("--trials", type=int, default=10)
    s.add_argument("--threshold", type=float)
    s.add_argument("--n-points", type=int, default=1024)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dtype", choices=sorted(DTYPES))
    s.set_defaults(func=cmd_check_invariance)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FormatError, DegenerateGeometryError, InsufficientPointsError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
