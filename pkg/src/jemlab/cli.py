"""Command-line entry point: ``jemlab {train,sample,eval,ood,attack,distal}``.

Every command is deterministic given its config (embedded in the checkpoint
for all commands but ``train``) and seed. Outputs are JSON, JSON lines,
JTB datasets and two-column text files for plotting.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import evaluation, robustness
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import ConfigError, DataFormatError, LabeledDataset, load_file, save_file
from .experiment import build_data, build_model, load_config
from .rng import make_rng
from .sampler import SamplerConfig, sample_px_method1, sample_px_method2
from .trainer import TrainingFailedError, init_state, train

log = logging.getLogger("jemlab")

EXIT_USAGE = 2
EXIT_TRAIN_FAILED = 3


class UsageError(ValueError):
    pass


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _write_text(path: Path, text: str) -> None:
    path.write_text(text)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args):
    ck = load_checkpoint(args.checkpoint)
    if args.seed is not None:
        ck.run = ck.run.with_seed(args.seed)
    return ck


def _dataset(args, ck) -> LabeledDataset:
    """The ``--dataset`` file (already in model input space) or the run's validation split."""
    if getattr(args, "dataset", None):
        ds = load_file(args.dataset, num_classes=ck.model.num_classes)
    else:
        ds = build_data(ck.run).val
    if ds.dim != ck.model.input_dim:
        raise UsageError(f"dataset has {ds.dim} features, model expects {ck.model.input_dim}")
    if ds.num_classes != ck.model.num_classes:
        raise UsageError(f"dataset has K={ds.num_classes}, model has K={ck.model.num_classes}")
    return ds


# -- train -----------------------------------------------------------------


def cmd_train(args) -> int:
    if not args.config:
        raise UsageError("train needs --config")
    run = load_config(args.config, seed=args.seed)
    out = _out_dir(args)
    data = build_data(run)
    digest = run.data.digest()
    norm = data.train.normalization
    metrics_path = out / "metrics.jsonl"
    last = out / "checkpoint_last.jemc"

    if args.resume:
        ck = load_checkpoint(last)
        if ck.run.to_text() != run.to_text():
            raise UsageError("config differs from the one stored in the checkpoint being resumed")
        state = ck.state
        model = state.model
        lines = metrics_path.read_text().splitlines(keepends=True) if metrics_path.exists() else []
        metrics_path.write_text("".join(lines[: state.epoch]))
    else:
        model = build_model(run, data.train.dim, data.train.num_classes)
        state = init_state(model, run.train, make_rng(run.seed, "train"))
        metrics_path.write_text("")
        save_file(data.train, out / "train.jtb")
        save_file(data.val, out / "val.jtb")
    _write_text(out / "config.resolved", run.to_text())

    best = {"val": max((m["val_acc"] for m in state.history), default=-1.0)}
    stop_after = args.stop_after

    class _Stop(Exception):
        pass

    def on_epoch(st, metrics):
        with open(metrics_path, "a") as fh:
            fh.write(json.dumps(metrics, sort_keys=True) + "\n")
        save_checkpoint(last, st, run, norm, digest)
        if metrics["val_acc"] > best["val"]:
            best["val"] = metrics["val_acc"]
            save_checkpoint(out / "checkpoint_best.jemc", st, run, norm, digest)
        log.info("epoch %d val_acc %.4f l_clf %.4g l_gen %.4g", metrics["epoch"], metrics["val_acc"],
                 metrics["l_clf"], metrics["l_gen"])
        if stop_after is not None and st.epoch >= stop_after:
            raise _Stop

    try:
        train(model, data.train, run.train, val=data.val, state=state, on_epoch=on_epoch)
    except _Stop:
        return 0
    except TrainingFailedError as exc:
        save_checkpoint(out / "checkpoint_failed.jemc", exc.state, run, norm, digest)
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN_FAILED
    return 0


# -- sample ----------------------------------------------------------------


def cmd_sample(args) -> int:
    ck = _load(args)
    if args.n < 1 or args.steps < 0:
        raise UsageError("sample needs --n >= 1 and --steps >= 0")
    out = _out_dir(args)
    model = ck.model
    cfg = ck.run.train.sampler
    if args.noise is not None:
        cfg = SamplerConfig(**(cfg.to_dict() | {"sigma": args.noise}))
    rng = make_rng(ck.run.seed, "sample", args.method)
    if args.method == 1:
        x, y = sample_px_method1(model, cfg, rng, args.steps, args.n)
    else:
        x = sample_px_method2(model, cfg, rng, args.steps, args.n)
        y = np.argmax(model.logits(x), axis=1)
    save_file(LabeledDataset(x, y, model.num_classes, name="samples"), out / "samples.jtb")
    if x.shape[1] == 2:
        _write_text(out / "samples.txt", evaluation.two_column_text(x[:, 0], x[:, 1]))
    _dump_json(out / "samples.json", {
        "method": args.method, "n": args.n, "steps": args.steps, "sampler": cfg.to_dict(),
        "log_p_tilde_mean": float(np.mean(model.log_p_tilde(x))),
        "label_counts": np.bincount(y, minlength=model.num_classes).tolist(),
    })
    return 0


# -- eval ------------------------------------------------------------------


def cmd_eval(args) -> int:
    ck = _load(args)
    ds = _dataset(args, ck)
    out = _out_dir(args)
    lp = ck.model.log_p_y_given_x(ds.inputs)
    pred = np.argmax(lp, axis=1)
    conf = np.exp(np.max(lp, axis=1))
    table = evaluation.ece(np.clip(conf, 0.0, 1.0), pred == ds.labels)
    _dump_json(out / "eval.json", {"n": len(ds), "accuracy": float(np.mean(pred == ds.labels)),
                                   "reliability": table.to_dict()})
    mids = 0.5 * (table.edges()[:-1] + table.edges()[1:])
    _write_text(out / "reliability.txt", evaluation.two_column_text(mids, table.accuracy))
    return 0


# -- ood -------------------------------------------------------------------


def cmd_ood(args) -> int:
    ck = _load(args)
    in_ds = _dataset(args, ck)
    out = _out_dir(args)
    if args.ood:
        sets = {}
        for p in args.ood:
            ds = load_file(p)
            if ds.dim != in_ds.dim:
                raise UsageError(f"{p}: {ds.dim} features, expected {in_ds.dim}")
            sets[Path(p).stem] = ds.inputs
    else:
        sets = evaluation.default_ood_sets(in_ds.dim, len(in_ds), make_rng(ck.run.seed, "ood"))
    unknown = [s for s in args.scores if s not in evaluation.SCORES]
    if unknown:
        raise UsageError(f"unknown score {unknown[0]!r}")
    reports = evaluation.ood_report(ck.model, in_ds.inputs, sets, scores=args.scores)
    _dump_json(out / "ood.json", [r.to_dict() for r in reports])
    for r in reports:
        for name, (edges, a, b) in r.histograms.items():
            mids = 0.5 * (edges[:-1] + edges[1:])
            _write_text(out / f"hist_{r.score}_{name}_in.txt", evaluation.two_column_text(mids, a))
            _write_text(out / f"hist_{r.score}_{name}_ood.txt", evaluation.two_column_text(mids, b))
    return 0


# -- attack ----------------------------------------------------------------


def cmd_attack(args) -> int:
    ck = _load(args)
    ds = _dataset(args, ck)
    out = _out_dir(args)
    ac = ck.run.attack
    if ac.num_inputs < 1:
        raise UsageError("attack.num_inputs must be >= 1")
    scfg = ck.run.train.sampler
    pick = make_rng(ck.run.seed, "attack", "inputs").permutation(len(ds))[: ac.num_inputs]
    x, y = ds.inputs[pick], ds.labels[pick]
    ks = sorted(set(ac.refine_steps) | {0})
    report: dict = {"norm": ac.norm, "num_inputs": len(x), "refine_steps": ks, "min_eps": {}, "median_eps": {}}
    grid = np.linspace(0.0, ac.bracket(ds.dim), 101)
    adv0 = None
    for k in ks:
        defended = robustness.Defended(ck.model, k=k, n=ac.eot_samples, sampler=scfg)
        eps, adv = robustness.pgd_minimal_eps(defended, x, y, ac, make_rng(ck.run.seed, "attack", "pgd", k))
        report["min_eps"][str(k)] = [float(e) for e in eps]
        report["median_eps"][str(k)] = float(np.median(eps))
        _write_text(out / f"curve_k{k}_{ac.norm}.txt",
                    evaluation.two_column_text(grid, robustness.robustness_curve(eps, grid)))
        if k == 0:
            adv0, eps0 = adv, eps

    ok = np.isfinite(eps0) & (eps0 > 0)
    save_file(LabeledDataset(adv0[ok] if ok.any() else x[:1], y[ok] if ok.any() else y[:1],
                             ck.model.num_classes, name="adv_k0"), out / "adv_k0.jtb")
    report["transfer_accuracy"] = {}
    if ok.any():
        for k in ks:
            defended = robustness.Defended(ck.model, k=k, n=ac.eot_samples, sampler=scfg)
            report["transfer_accuracy"][str(k)] = robustness.transfer_eval(
                defended, adv0[ok], y[ok], make_rng(ck.run.seed, "attack", "transfer", k), ac.votes)

    base = robustness.Defended(ck.model, k=0, n=1, sampler=scfg)
    prng = make_rng(ck.run.seed, "attack", "pointwise")
    pw = np.array([robustness.pointwise_attack(base, xi, yi, ac.norm, prng, ac.votes) for xi, yi in zip(x, y)])
    report["pointwise_eps"] = [float(e) for e in pw]
    both = np.isfinite(eps0) & (eps0 > 0)
    report["pointwise_ge_pgd_fraction"] = float(np.mean(pw[both] >= eps0[both])) if both.any() else None
    _dump_json(out / "attack.json", report)
    return 0


# -- distal ----------------------------------------------------------------


def cmd_distal(args) -> int:
    ck = _load(args)
    if args.n < 1:
        raise UsageError("distal needs --n >= 1")
    out = _out_dir(args)
    res = robustness.distal_generate(ck.model, args.target, make_rng(ck.run.seed, "distal", args.target),
                                     conf_target=args.conf, max_iters=args.max_iters, n=args.n,
                                     init=ck.run.train.sampler)
    _dump_json(out / "distal.json", {
        "target": args.target, "conf_target": args.conf, "reached_fraction": float(np.mean(res.reached)),
        "confidence": res.confidence.tolist(), "x": res.x.tolist(),
        "log_p_tilde": ck.model.log_p_tilde(res.x).tolist(),
    })
    it = np.arange(len(res.trajectory))
    _write_text(out / "trajectory.txt", evaluation.two_column_text(it, res.trajectory.mean(axis=1)))
    save_file(LabeledDataset(res.x, np.full(args.n, args.target), ck.model.num_classes, name="distal"),
              out / "distal.jtb")
    return 0


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config (key = value file)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP threads")
    common.add_argument("--resume", action="store_true", help="continue from the last checkpoint in --out")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="jemlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--stop-after", type=int, default=None, metavar="EPOCH",
                   help="stop once this many epochs are done, leaving a resumable checkpoint")
    t.set_defaults(func=cmd_train)

    def with_ckpt(name, func, help_):
        s = sub.add_parser(name, parents=[common], help=help_)
        s.add_argument("--checkpoint", required=True)
        s.set_defaults(func=func)
        return s

    s = with_ckpt("sample", cmd_sample, "draw samples from a trained model")
    s.add_argument("--method", type=int, choices=(1, 2), default=2)
    s.add_argument("--n", type=int, default=500)
    s.add_argument("--steps", type=int, default=200)
    s.add_argument("--noise", type=float, default=None, help="override the SGLD noise scale")

    e = with_ckpt("eval", cmd_eval, "accuracy and calibration")
    e.add_argument("--dataset", help="JTB/CSV file in model input space (default: validation split)")

    o = with_ckpt("ood", cmd_ood, "out-of-distribution scores and AUROC")
    o.add_argument("--dataset", help="in-distribution file (default: validation split)")
    o.add_argument("--ood", nargs="*", default=[], help="OOD dataset files (default: constant and uniform)")
    o.add_argument("--scores", nargs="+", default=["logp", "maxprob", "approx_mass"])

    a = with_ckpt("attack", cmd_attack, "PGD/pointwise robustness and transfer")
    a.add_argument("--dataset", help="inputs to attack (default: validation split)")

    d = with_ckpt("distal", cmd_distal, "high-confidence inputs grown from noise")
    d.add_argument("--target", type=int, required=True)
    d.add_argument("--conf", type=float, default=0.9)
    d.add_argument("--max-iters", type=int, default=200)
    d.add_argument("--n", type=int, default=10)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (ConfigError, DataFormatError, CheckpointError, UsageError, IndexError, FileNotFoundError) as exc:
        print(f"jemlab {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
