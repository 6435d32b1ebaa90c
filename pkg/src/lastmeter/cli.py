"""Command-line entry point: collect | train | rollout | eval | report.

Exit codes: 0 success, 1 domain failure (divergence, non-finite loss, bad
artifact, hash mismatch), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, nn
from . import pipeline as P
from .config import RunConfig, SegNoiseSpec
from .decoders import load_policy, save_policy
from .expert import dataset_from_manifest, read_trajectories, write_trajectories
from .geometry import InvalidArgument
from .metrics import MetricReport, ValidationError, aggregate, bar_chart_svg
from .rollout import AuxThresholds, ExpertOraclePolicy, read_logs, write_logs

log = logging.getLogger("lastmeter")

TRAJECTORIES = "trajectories.jsonl"
STORE = "observations.npz"
SIDECAR = "observations.lmob"
DATASET = "dataset.json"
THRESHOLDS = "thresholds.json"
SUMMARY = "collect.json"


class CommandError(RuntimeError):
    """Domain failure reported with exit code 1."""


def _dump(path: Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _load_json(path: Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise CommandError(f"missing artifact {path}") from exc
    except json.JSONDecodeError as exc:
        raise CommandError(f"{path}: malformed JSON ({exc})") from exc


def _check_hash(found: str, cfg: RunConfig, what: str, force: bool) -> None:
    if found != cfg.hash():
        msg = f"{what} was produced with config {found}, current config is {cfg.hash()}"
        if not force:
            raise CommandError(msg + " (use --force to override)")
        log.warning(msg)


# --- collect ---------------------------------------------------------------

def cmd_collect(cfg: RunConfig, args) -> int:
    if args.dry_run:
        for i, pose in enumerate(P.start_poses(cfg, args.grid)):
            print(f"{i}\t{pose.x:.6f}\t{pose.y:.6f}\t{pose.theta:.6f}")
        return 0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    col = P.collect(cfg, args.grid, sidecar=out / SIDECAR if args.sidecar else None)
    for tid, msg in col.divergences:
        print(f"divergence: {msg}", file=sys.stderr)
    write_trajectories(out / TRAJECTORIES, col.trajectories, col.offsets)
    col.store.save(out / STORE)
    ds = P.make_dataset(cfg, col)
    _dump(out / DATASET, ds.manifest())
    th = P.thresholds_from_collection(col)
    _dump(out / THRESHOLDS, {**th.to_dict(), "config_hash": cfg.hash(), "goal_com": list(col.goal_com)})
    lengths = [rec.length for rec in col.trajectories]
    summary = {
        "config_hash": cfg.hash(),
        "grid": args.grid,
        "trajectories": len(col.trajectories),
        "mean_length": float(np.mean(lengths)) if lengths else 0.0,
        "divergences": len(col.divergences),
        "observations": len(col.store),
        "samples": len(ds),
        "version": __version__,
    }
    _dump(out / SUMMARY, summary)
    print(f"collected {summary['trajectories']} trajectories, mean length {summary['mean_length']:.2f}, "
          f"{summary['divergences']} divergences, {summary['samples']} samples -> {out}")
    return 1 if col.divergences else 0


def load_collection(cfg: RunConfig, data: Path, force: bool = False):
    """Dataset and aux thresholds from a collect output directory."""
    data = Path(data)
    manifest = _load_json(data / DATASET)
    _check_hash(manifest.get("config_hash", ""), cfg, str(data / DATASET), force)
    try:
        trajectories = read_trajectories(data / TRAJECTORIES)
        store = P.ObservationStore.load(data / STORE)
    except FileNotFoundError as exc:
        raise CommandError(f"missing artifact {exc.filename}") from exc
    except ValueError as exc:
        raise CommandError(str(exc)) from exc
    if store.grid != cfg.train.grid:
        raise CommandError(f"token store pooled at grid {store.grid}, config asks for {cfg.train.grid}")
    ds = dataset_from_manifest(manifest, trajectories, store)
    return ds, load_thresholds(data / THRESHOLDS)


def load_thresholds(path: Path) -> AuxThresholds:
    d = _load_json(path)
    return AuxThresholds(float(d["bbox_area_lo"]), float(d["bbox_area_hi"]), float(d["com_radius"]))


# --- train -----------------------------------------------------------------

def cmd_train(cfg: RunConfig, args) -> int:
    ds, th = load_collection(cfg, args.data, args.force)
    variant = args.variant or cfg.train.variant

    def progress(epoch, loss):
        log.info("epoch %d loss %.5f", epoch, loss)

    try:
        dcfg, params, curve = P.train_policy(cfg, ds, variant, epochs=args.epochs, progress=progress)
    except nn.NumericError as exc:
        raise CommandError(str(exc)) from exc
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = {"config_hash": cfg.hash(), "seed": cfg.seed, "epochs": len(curve), "samples": len(ds),
            "thresholds": th.to_dict(), "version": __version__}
    save_policy(out, dcfg, params, meta)
    with open(out.with_suffix(".loss.csv"), "w") as fh:
        fh.write("epoch,loss\n")
        for i, v in enumerate(curve, start=1):
            fh.write(f"{i},{v:.8f}\n")
    print(f"trained {variant} decoder for {len(curve)} epochs, final loss {curve[-1]:.5f} -> {out}")
    return 0


# --- rollout ---------------------------------------------------------------

def _rollout_thresholds(cfg: RunConfig, args, meta: dict | None) -> AuxThresholds | None:
    if cfg.eval.thresholds_source == "explicit":
        e = cfg.eval
        return AuxThresholds(e.bbox_area_lo, e.bbox_area_hi, e.com_radius)
    if args.data:
        return load_thresholds(Path(args.data) / THRESHOLDS)
    if meta and "thresholds" in meta:
        t = meta["thresholds"]
        return AuxThresholds(t["bbox_area_lo"], t["bbox_area_hi"], t["com_radius"])
    return None


def cmd_rollout(cfg: RunConfig, args) -> int:
    meta = None
    if args.policy == "expert-oracle":
        factory = ExpertOraclePolicy
        policy_name = "ExpertOracle"
    else:
        if not args.checkpoint:
            raise CommandError("--checkpoint is required for the learned policy")
        try:
            dcfg, params, meta = load_policy(Path(args.checkpoint))
        except FileNotFoundError as exc:
            raise CommandError(f"missing checkpoint {args.checkpoint}") from exc
        except (ValueError, KeyError) as exc:
            raise CommandError(f"{args.checkpoint}: {exc}") from exc
        _check_hash(meta.get("config_hash", ""), cfg, str(args.checkpoint), args.force)
        factory = P.learned_policy_factory(dcfg, params)
        policy_name = "DinoScore" if dcfg.variant == "score" else "DinoAttention"
    th = _rollout_thresholds(cfg, args, meta)
    aux = cfg.rollout.aux_stop if args.aux is None else args.aux
    if th is None:
        if aux:
            raise CommandError("aux stop needs thresholds: pass --data or use a checkpoint that records them")
    noise = cfg.rollout.seg_noise
    if args.dropout is not None:
        noise = SegNoiseSpec(args.dropout, noise.jitter_cells, noise.flicker_prob, noise.false_positive_prob)
    try:
        logs = P.rollout_suite(cfg, factory, args.instances, aux, th, noise, args.env, args.noiseless,
                               tags={"policy": policy_name})
    except InvalidArgument as exc:
        raise CommandError(str(exc)) from exc
    header = {
        "config_hash": cfg.hash(),
        "policy": policy_name,
        "instances": args.instances,
        "aux_stop": aux,
        "aux_rule": cfg.rollout.aux_rule,
        "thresholds": th.to_dict() if th else None,
        "noiseless": args.noiseless,
        "version": __version__,
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_logs(out, logs, header)
    counts = {}
    for lg in logs:
        counts[lg.termination.value] = counts.get(lg.termination.value, 0) + 1
    print(f"{len(logs)} rollouts ({policy_name}, {args.instances}, aux={'on' if aux else 'off'}): "
          + ", ".join(f"{k}={v}" for k, v in sorted(counts.items())) + f" -> {out}")
    return 0


# --- eval ------------------------------------------------------------------

def cmd_eval(cfg: RunConfig, args) -> int:
    logs, header = [], {}
    for path in args.logs:
        try:
            h, part = read_logs(Path(path))
        except FileNotFoundError as exc:
            raise CommandError(f"missing log file {path}") from exc
        except ValueError as exc:
            raise CommandError(str(exc)) from exc
        _check_hash(h.get("config_hash", ""), cfg, str(path), args.force)
        header = header or h
        logs.extend(part)
    if args.com_radius is not None:
        radius = args.com_radius
    elif header.get("thresholds"):
        radius = header["thresholds"]["com_radius"]
    elif args.data:
        radius = load_thresholds(Path(args.data) / THRESHOLDS).com_radius
    else:
        raise CommandError("no CoM radius: pass --com-radius or --data, or use logs that record thresholds")
    try:
        report = aggregate(logs, radius)
    except ValidationError as exc:
        raise CommandError(str(exc)) from exc
    report.meta.update({k: header.get(k) for k in ("policy", "instances", "aux_stop", "config_hash")})
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    prefix.with_suffix(".json").write_text(report.to_json() + "\n")
    prefix.with_suffix(".csv").write_text(report.to_csv())
    label = _label(report.meta)
    prefix.with_suffix(".svg").write_text(bar_chart_svg({label: _rates(report)}))
    print(f"{label}: edge {report.edge_success_rate:.2%}  object {report.object_success_rate:.2%}  "
          f"({report.counts['rollouts']} rollouts) -> {prefix}.json")
    return 0


def _label(meta: dict) -> str:
    aux = "aux" if meta.get("aux_stop") else "no aux"
    return f"{meta.get('policy', '?')} / {meta.get('instances', '?')} / {aux}"


def _rates(report) -> dict:
    if isinstance(report, MetricReport):
        return {"edge": report.edge_success_rate, "object": report.object_success_rate}
    return {"edge": report["edge_success_rate"], "object": report["object_success_rate"]}


# --- report ----------------------------------------------------------------

def cmd_report(cfg: RunConfig, args) -> int:
    groups = {}
    lines = ["| run | edge | object | rollouts |", "|---|---|---|---|"]
    for path in args.reports:
        d = _load_json(Path(path))
        try:
            label = _label(d["meta"])
            groups[label] = _rates(d)
            lines.append(f"| {label} | {d['edge_success_rate']:.2%} | {d['object_success_rate']:.2%} "
                         f"| {d['counts']['rollouts']} |")
        except KeyError as exc:
            raise CommandError(f"{path}: not a metric report (missing {exc})") from exc
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    prefix.with_suffix(".md").write_text("\n".join(lines) + "\n")
    prefix.with_suffix(".svg").write_text(bar_chart_svg(groups))
    manifest = {"config_hash": cfg.hash(), "version": __version__, "reports": [str(p) for p in args.reports],
                "table": str(prefix.with_suffix(".md")), "chart": str(prefix.with_suffix(".svg"))}
    _dump(prefix.with_suffix(".manifest.json"), manifest)
    print("\n".join(lines))
    return 0


# --- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lastmeter", description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, help="JSON run config (defaults are built in)")
    ap.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command")

    c = sub.add_parser("collect", help="expert trajectories, token store and dataset manifest")
    c.add_argument("--out", default="runs/data")
    c.add_argument("--grid", choices=["training", "rollout"], default="training")
    c.add_argument("--dry-run", action="store_true", help="print the start poses and write nothing")
    c.add_argument("--sidecar", action="store_true", help="also write raw feature grids (large)")

    t = sub.add_parser("train", help="behaviour-cloning fit of one decoder")
    t.add_argument("--data", default="runs/data")
    t.add_argument("--variant", choices=["score", "attention"])
    t.add_argument("--epochs", type=int)
    t.add_argument("--out", default="runs/policy.lmpd")
    t.add_argument("--force", action="store_true")

    r = sub.add_parser("rollout", help="run the policy from every start of the rollout grid")
    r.add_argument("--checkpoint")
    r.add_argument("--policy", choices=["learned", "expert-oracle"], default="learned")
    r.add_argument("--data", help="collect directory to take aux thresholds from")
    r.add_argument("--instances", choices=["seen", "unseen"], default="seen")
    r.add_argument("--aux", dest="aux", action="store_true", default=None)
    r.add_argument("--no-aux", dest="aux", action="store_false")
    r.add_argument("--dropout", type=float, help="override segmentation dropout probability")
    r.add_argument("--env", help="environment preset name")
    r.add_argument("--noiseless", action="store_true", help="zero actuation, feature and mask noise")
    r.add_argument("--out", default="runs/rollouts.jsonl")
    r.add_argument("--force", action="store_true")

    e = sub.add_parser("eval", help="score rollout logs")
    e.add_argument("logs", nargs="+")
    e.add_argument("--out", default="runs/report")
    e.add_argument("--data")
    e.add_argument("--com-radius", type=float)
    e.add_argument("--force", action="store_true")

    p = sub.add_parser("report", help="combine metric reports into a table and bar chart")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", default="runs/summary")
    return ap


COMMANDS = {"collect": cmd_collect, "train": cmd_train, "rollout": cmd_rollout, "eval": cmd_eval,
            "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config)
    except (InvalidArgument, ValueError, OSError) as exc:
        print(f"error: bad config: {exc}", file=sys.stderr)
        return 2
    if args.print_config:
        print(cfg.to_json())
        return 0
    if args.command is None:
        ap.print_usage(sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](cfg, args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
