"""Command line harness: gen, train, eval, traverse, check, counterexample.

Every command writes ``config.json`` (the fully resolved configuration)
next to its outputs. Exit codes: 0 success, 2 usage or configuration
error, 3 input/output error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, ExperimentConfig, resolve
from .estimator import LatentCausalModel
from .evaluate import EvalReport, MetricError, evaluate_latents, extract_adjacency, partition_report, shd
from .model import decode, prior_sample
from .oracles import (
    PreconditionError,
    build_counterexample,
    check_all_iv,
    check_assumption_ii,
    check_unit_triangular_jacobian,
)
from .scmgen import FmriFormatError, SegmentNoiseParams, SpecError, fmri_dataset, gen_dataset
from .train import TrainingError

logger = logging.getLogger("lanm")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def _prepare_out(path, force: bool, dry_run: bool) -> Path | None:
    if path is None:
        if dry_run:
            return None
        raise UsageError("--out is required")
    out = Path(path)
    if io.dir_is_nonempty(out) and not force:
        raise UsageError(f"{out} exists and is not empty (use --force to overwrite)")
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    if not dry_run:
        if out.exists() and force:
            shutil.rmtree(out)
        out.mkdir(parents=True, exist_ok=True)
    return out


def _seeds(args, cfg: ExperimentConfig):
    return [args.seed] if args.seed is not None else list(cfg.seeds)


def _seed_dirs(root: Path, seeds):
    if len(seeds) == 1:
        return {seeds[0]: root}
    return {s: root / f"seed_{s}" for s in seeds}


def _find_seed_dirs(root: Path):
    """``{seed: dir}`` for a multi-seed layout, or ``None`` for a single run."""
    subs = sorted(p for p in root.glob("seed_*") if p.is_dir())
    if not subs or (root / "manifest.json").is_file():
        return None
    return {int(p.name.split("_", 1)[1]): p for p in subs}


def _n_workers(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("LANM_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"LANM_THREADS must be an integer, got {env!r}") from None
    return 1


def _map(fn, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(fn, *zip(*jobs)))


def _write_config(out: Path, cfg: ExperimentConfig, seed: int):
    io.write_json(out / "config.json", cfg.with_seed(seed).to_dict())


def _make_dataset(cfg: ExperimentConfig, seed: int):
    if cfg.data.source == "fmri":
        return fmri_dataset(cfg.data.path, D=cfg.mixing.D, seed=seed if cfg.mixing.seed is None else cfg.mixing.seed)
    return gen_dataset(cfg.gen_config(seed))


def _estimator(cfg: ExperimentConfig, ell: int, seed: int) -> LatentCausalModel:
    m, t = cfg.model, cfg.train
    return LatentCausalModel(
        n_latents=ell,
        hidden=m.hidden,
        head_hidden=m.head_hidden,
        slope=m.slope,
        gamma=m.gamma,
        obs_var=m.obs_var,
        independent_prior=m.independent_prior,
        dense_posterior=m.dense_posterior,
        standardize=m.standardize,
        lr=t.lr,
        batch_size=t.batch_size,
        epochs=t.epochs,
        random_state=seed,
    )


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------


def _gen_one(cfg: ExperimentConfig, seed: int, out: Path):
    ds = _make_dataset(cfg, seed)
    io.save_dataset(ds, out)
    _write_config(out, cfg, seed)
    return {"seed": seed, "out": str(out), "N": ds.N, "ell": ds.ell, "D": ds.D, "M": ds.M}


def cmd_gen(args, cfg):
    seeds = _seeds(args, cfg)
    out = _prepare_out(args.out, args.force, args.dry_run)
    if args.dry_run:
        print(f"config valid; would write {len(seeds)} dataset(s)")
        return EXIT_OK
    dirs = _seed_dirs(out, seeds)
    for s, d in dirs.items():
        d.mkdir(parents=True, exist_ok=True)
    for row in _map(_gen_one, [(cfg, s, d) for s, d in dirs.items()], _n_workers(args)):
        print("dataset seed={seed} N={N} ell={ell} D={D} M={M} -> {out}".format(**row))
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _train_one(cfg: ExperimentConfig, seed: int, data_dir: Path, out: Path, resume):
    ds = io.load_dataset(data_dir)
    if ds.ell != cfg.scm.ell:
        raise UsageError(f"dataset has ell={ds.ell} but config scm.ell={cfg.scm.ell}")
    if resume is not None:
        est = LatentCausalModel.load(resume)
        if est.model_.config.x_dim != ds.D or est.model_.config.u_dim != ds.M:
            raise UsageError("checkpoint dimensions do not match the dataset")
        est.set_params(epochs=cfg.train.epochs, warm_start=True)
    else:
        est = _estimator(cfg, ds.ell, seed)
        est.set_params(n_segments=ds.M)

    def checkpoint(model, state, epoch):
        if cfg.train.checkpoint_every and epoch % cfg.train.checkpoint_every == 0:
            est.save(out, meta={"epochs_done": epoch, "seed": seed})

    try:
        est.fit(ds.x, ds.labels, checkpoint_fn=checkpoint if cfg.train.checkpoint_every else None)
    except TrainingError as e:
        if e.model is not None:
            est.model_ = e.model
            io.save_checkpoint(out, e.model, None, {"aborted": str(e), "seed": seed}, est.x_mean_, est.x_scale_)
        raise
    est.save(out, meta={"seed": seed})
    start = est.epochs_done_ - cfg.train.epochs
    est.train_log_.to_csv(out / "log.csv", start_epoch=start)
    _write_config(out, cfg, seed)
    last = est.train_log_.epochs[-1].total if est.train_log_.epochs else float("nan")
    return {"seed": seed, "out": str(out), "epochs": est.epochs_done_, "final_elbo": last}


def cmd_train(args, cfg):
    data_root = Path(args.dataset)
    if not data_root.is_dir():
        raise FileNotFoundError(f"{data_root}: dataset directory not found")
    multi = _find_seed_dirs(data_root)
    in_place = args.resume is not None and args.out is not None and Path(args.resume).resolve() == Path(args.out).resolve()
    out = Path(args.out) if in_place else _prepare_out(args.out, args.force, args.dry_run)
    if args.dry_run:
        print("config valid; nothing written")
        return EXIT_OK
    if multi is None:
        seeds = _seeds(args, cfg)[:1]
        jobs = [(cfg, seeds[0], data_root, out, args.resume)]
    else:
        seeds = [args.seed] if args.seed is not None else sorted(multi)
        missing = [s for s in seeds if s not in multi]
        if missing:
            raise UsageError(f"no dataset for seed(s) {missing} under {data_root}")
        jobs = [(cfg, s, multi[s], out / f"seed_{s}", None) for s in seeds]
    for j in jobs:
        j[3].mkdir(parents=True, exist_ok=True)
    for row in _map(_train_one, jobs, _n_workers(args)):
        print("trained seed={seed} epochs={epochs} final_elbo={final_elbo:.4f} -> {out}".format(**row))
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def evaluate_run(ds, est: LatentCausalModel, cfg: ExperimentConfig) -> EvalReport:
    """Full report for one dataset/model pair."""
    th = cfg.thresholds()
    z_hat = est.transform(ds.x, ds.labels)
    pnl = ds.spec is not None and ds.spec.pnl is not None and any(t != "identity" for t in ds.spec.pnl)
    report = evaluate_latents(ds.latents, z_hat, pnl=pnl, thresholds=th)
    perm = np.asarray(report.assignment) - 1
    A_hat = extract_adjacency(est.model_, assignment=perm, tau=th.tau, segments=np.arange(ds.M))
    report.adjacency = A_hat.tolist()
    if ds.spec is not None:
        A = ds.spec.effective_adjacency()
        report.adjacency_true = A.tolist()
        report.shd = shd(A, A_hat)
        viol = [v + 1 for v in ds.spec.violation_nodes]
        report.partition = partition_report(report.verdicts, viol)
    report.extra = {"N": int(ds.N), "source": ds.manifest.get("source", "synthetic")}
    return report


def _eval_one(cfg, seed, data_dir: Path, ckpt: Path, out: Path):
    ds = io.load_dataset(data_dir)
    est = LatentCausalModel.load(ckpt)
    c = est.model_.config
    if c.x_dim != ds.D or c.u_dim != ds.M or c.ell != ds.ell:
        raise UsageError(
            f"checkpoint (ell={c.ell}, D={c.x_dim}, M={c.u_dim}) does not match dataset "
            f"(ell={ds.ell}, D={ds.D}, M={ds.M})"
        )
    report = evaluate_run(ds, est, cfg)
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(out / "report.json", report.to_dict())
    report.to_csv(out / "report.csv")
    _write_config(out, cfg, seed)
    return {"seed": seed, "mpc": report.mpc, "shd": report.shd, "verdicts": report.verdicts}


def _mean_stderr(values):
    v = np.asarray([x for x in values if x is not None], dtype=np.float64)
    if v.size == 0:
        return None, None
    se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


def cmd_eval(args, cfg):
    data_root, ckpt_root = Path(args.dataset), Path(args.checkpoint)
    for p in (data_root, ckpt_root):
        if not p.is_dir():
            raise FileNotFoundError(f"{p}: directory not found")
    out = _prepare_out(args.out, args.force, args.dry_run)
    if args.dry_run:
        print("config valid; nothing written")
        return EXIT_OK
    d_multi, c_multi = _find_seed_dirs(data_root), _find_seed_dirs(ckpt_root)
    if (d_multi is None) != (c_multi is None):
        raise UsageError("dataset and checkpoint must both be single runs or both multi-seed")
    if d_multi is None:
        seed = _seeds(args, cfg)[0]
        jobs = [(cfg, seed, data_root, ckpt_root, out)]
    else:
        seeds = sorted(set(d_multi) & set(c_multi))
        if not seeds:
            raise UsageError("no seed present in both dataset and checkpoint directories")
        jobs = [(cfg, s, d_multi[s], c_multi[s], out / f"seed_{s}") for s in seeds]
    rows = _map(_eval_one, jobs, _n_workers(args))
    for r in rows:
        print(f"eval seed={r['seed']} mpc={r['mpc']:.4f} shd={r['shd']} verdicts={','.join(r['verdicts'])}")
    if len(rows) > 1:
        mpc_m, mpc_se = _mean_stderr([r["mpc"] for r in rows])
        shd_m, shd_se = _mean_stderr([r["shd"] for r in rows])
        with open(out / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "mpc", "shd"])
            for r in rows:
                w.writerow([r["seed"], repr(r["mpc"]), r["shd"]])
            w.writerow(["mean", repr(mpc_m), "" if shd_m is None else repr(shd_m)])
            w.writerow(["stderr", repr(mpc_se), "" if shd_se is None else repr(shd_se)])
        summary = {
            "per_seed": [{"seed": r["seed"], "mpc": r["mpc"], "shd": r["shd"]} for r in rows],
            "mpc_mean": mpc_m,
            "mpc_stderr": mpc_se,
            "shd_mean": shd_m,
            "shd_stderr": shd_se,
        }
        io.write_json(out / "report.json", summary)
        _write_config(out, cfg, rows[0]["seed"])
        print(f"summary mpc={mpc_m:.4f} +/- {mpc_se:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# traverse
# ---------------------------------------------------------------------------


def traverse_table(est: LatentCausalModel, node: int, lo: float, hi: float, steps: int, probes: int = 256, seed=0):
    """Rows of ``(step, value, per-latent mean, per-feature mean delta)``.

    ``node`` is 1-based. Probe latents are ancestral draws from the learned
    prior over all segments; the same noise is reused at every grid value so
    differences reflect the intervention only.
    """
    m = est.model_
    c = m.config
    if not 1 <= node <= c.ell:
        raise UsageError(f"node must be in 1..{c.ell}, got {node}")
    if steps < 1:
        raise UsageError("steps must be at least 1")
    if steps > 1 and not hi > lo:
        raise UsageError(f"degenerate range [{lo}, {hi}]")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, c.u_dim, size=probes)
    u = np.eye(c.u_dim)[labels]
    noise = rng.standard_normal((probes, c.ell))
    base_z = prior_sample(m, u, noise)
    base_x = decode(m, base_z)
    grid = np.linspace(lo, hi, steps) if steps > 1 else np.array([lo])
    rows = []
    for k, v in enumerate(grid):
        z = prior_sample(m, u, noise, do={node - 1: v})
        x = decode(m, z)
        if est.x_mean_ is not None:
            delta = (x - base_x) * est.x_scale_
        else:
            delta = x - base_x
        rows.append([k, float(v)] + z.mean(axis=0).tolist() + delta.mean(axis=0).tolist())
    header = ["step", "value"] + [f"z{i + 1}" for i in range(c.ell)] + [f"dx{j + 1}" for j in range(c.x_dim)]
    return header, rows


def cmd_traverse(args, cfg):
    ckpt = Path(args.checkpoint)
    if not ckpt.is_dir():
        raise FileNotFoundError(f"{ckpt}: checkpoint directory not found")
    lo, hi = args.range
    out = _prepare_out(args.out, args.force, args.dry_run)
    est = LatentCausalModel.load(ckpt)
    seed = _seeds(args, cfg)[0]
    header, rows = traverse_table(est, args.node, lo, hi, args.steps, args.probes, seed)
    if args.dry_run:
        print(f"config valid; would write {len(rows)} traversal rows")
        return EXIT_OK
    with open(out / "traverse.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([r[0]] + [repr(v) for v in r[1:]])
    _write_config(out, cfg, seed)
    print(f"traversal node={args.node} steps={len(rows)} -> {out / 'traverse.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# check
# ---------------------------------------------------------------------------


def check_dataset(ds, seed=0) -> dict:
    """Assumption reports for a dataset (ground truth when available)."""
    result = {"notices": []}
    if ds.noise_params is not None:
        params = ds.noise_params
    else:
        # no generator: per-segment Gaussian moments of the latents
        alpha = np.vstack([ds.z[ds.labels == k].mean(axis=0) for k in range(ds.M)])
        beta = np.vstack([ds.z[ds.labels == k].var(axis=0) for k in range(ds.M)])
        beta = np.maximum(beta, 1e-12)
        params = SegmentNoiseParams(alpha, beta)
        result["notices"].append("(ii) computed from fitted per-segment Gaussian moments")
    result["ii"] = check_assumption_ii(params, seed=seed).to_dict()
    if ds.spec is None or ds.coeffs is None:
        result["notices"].append("no ground-truth generator: (iv) and Jacobian checks skipped")
        result["iv"] = None
        result["jacobian"] = None
        return result
    iv = check_all_iv(ds.spec, ds.coeffs, ds.z)
    result["iv"] = [r.to_dict() for r in iv]
    rng = np.random.default_rng(seed)
    pts = ds.n[rng.choice(ds.N, size=min(100, ds.N), replace=False)] if ds.n is not None else None
    jac = []
    try:
        for s in range(min(10, ds.coeffs.shape[0])):
            jac.append({"segment": s, **check_unit_triangular_jacobian(ds.spec, ds.coeffs, s, pts[:10]).to_dict()})
        result["jacobian"] = {"passed": all(j["passed"] for j in jac), "segments": jac}
    except PreconditionError as e:
        result["jacobian"] = None
        result["notices"].append(str(e))
    return result


def cmd_check(args, cfg):
    seed = _seeds(args, cfg)[0]
    if args.dataset is not None:
        src = Path(args.dataset)
        if not src.is_dir():
            raise FileNotFoundError(f"{src}: dataset directory not found")
        ds = io.load_dataset(src)
    else:
        ds = None
    out = _prepare_out(args.out, args.force, args.dry_run)
    if args.dry_run:
        print("config valid; would write the assumption report")
        return EXIT_OK
    if ds is None:
        ds = _make_dataset(cfg, seed)
    report = check_dataset(ds, seed)
    io.write_json(out / "report.json", report)
    _write_config(out, cfg, seed)
    print(f"(ii) {report['ii']['verdict']}" + (f" ({report['ii']['reason']})" if report["ii"]["reason"] else ""))
    for r in report["iv"] or []:
        print(f"(iv) node {r['node']}: {r['verdict']}" + (f" ({r['reason']})" if r["reason"] else ""))
    for n in report["notices"]:
        print(f"notice: {n}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# counterexample
# ---------------------------------------------------------------------------


def cmd_counterexample(args, cfg):
    seed = _seeds(args, cfg)[0]
    out = _prepare_out(args.out, args.force, args.dry_run)
    if args.dry_run:
        print("would write the counterexample report")
        return EXIT_OK
    pair = build_counterexample(seed=seed, probes=args.probes, mlp2_constant=args.mlp2_constant)
    summary = pair.summary()
    summary["mlp2_constant"] = bool(args.mlp2_constant)
    summary["seed"] = seed
    io.write_json(out / "report.json", summary)
    _write_config(out, cfg, seed)
    print(f"max |x - x'| = {summary['max_abs_x_diff']:.3e}; corr(z2, z2') = {summary['corr_z2_z2alt']:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config's seed list with one seed")
    common.add_argument("--config", default=None, help="experiment config JSON (defaults apply when omitted)")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    common.add_argument("--dry-run", action="store_true", help="validate inputs and exit without writing")
    common.add_argument("--threads", type=int, default=None, help="max concurrent seeds (env LANM_THREADS)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="lanm", description="Latent additive noise models: data, training and evaluation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("gen", parents=[common], help="generate a synthetic (or fMRI-derived) dataset")

    t = sub.add_parser("train", parents=[common], help="train a model on a dataset")
    t.add_argument("dataset")
    t.add_argument("--resume", default=None, help="checkpoint directory to continue from")

    e = sub.add_parser("eval", parents=[common], help="score a checkpoint against dataset ground truth")
    e.add_argument("dataset")
    e.add_argument("checkpoint")

    tr = sub.add_parser("traverse", parents=[common], help="latent intervention sweep")
    tr.add_argument("checkpoint")
    tr.add_argument("--node", type=int, required=True, help="1-based latent index")
    tr.add_argument("--range", type=float, nargs=2, default=(-2.0, 2.0), metavar=("LO", "HI"))
    tr.add_argument("--steps", type=int, default=9)
    tr.add_argument("--probes", type=int, default=256)

    c = sub.add_parser("check", parents=[common], help="assumption checks on a dataset or config")
    c.add_argument("dataset", nargs="?", default=None)

    ce = sub.add_parser("counterexample", parents=[common], help="observationally equivalent generator pair")
    ce.add_argument("--mlp2-constant", action="store_true")
    ce.add_argument("--probes", type=int, default=10_000)
    return p


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "traverse": cmd_traverse,
    "check": cmd_check,
    "counterexample": cmd_counterexample,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"lanm: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.seed is not None and args.seed < 0:
            raise UsageError("--seed must be non-negative")
        cfg = resolve(args.config)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError, SpecError, MetricError) as e:
        print(f"lanm: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, FloatingPointError) as e:
        print(f"lanm: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, io.FormatError, FmriFormatError) as e:
        print(f"lanm: io error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"lanm: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
