"""Full experiment matrix: collect once, train both decoders, roll out every condition."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

from . import pipeline as P
from .config import RunConfig, SegNoiseSpec
from .metrics import MetricReport
from .rollout import AuxThresholds, ExpertOraclePolicy, RolloutLog

log = logging.getLogger(__name__)

VARIANT_NAMES = {"score": "DinoScore", "attention": "DinoAttention"}


@dataclass
class BenchmarkResult:
    thresholds: AuxThresholds
    collection: dict
    reports: dict[str, MetricReport] = field(default_factory=dict)
    logs: dict[str, list[RolloutLog]] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    policies: dict[str, tuple] = field(default_factory=dict)
    dataset: object = None

    def rate(self, key: str, setting: str = "edge") -> float:
        r = self.reports[key]
        return r.edge_success_rate if setting == "edge" else r.object_success_rate

    def table(self) -> str:
        lines = [f"{'condition':40s} {'edge':>7s} {'object':>7s} {'timeouts':>8s}"]
        for key, r in self.reports.items():
            lines.append(f"{key:40s} {r.edge_success_rate:7.2%} {r.object_success_rate:7.2%} "
                         f"{r.counts.get('timed_out', 0):8d}")
        return "\n".join(lines)


def key(policy: str, instances: str, aux: bool, extra: str = "") -> str:
    return f"{policy}/{instances}/{'aux' if aux else 'noaux'}" + (f"/{extra}" if extra else "")


def run_benchmark(cfg: RunConfig, variants=("score", "attention"), dropout: float = 0.3,
                  expert_reference: bool = True, progress=None) -> BenchmarkResult:
    """Train each variant on the seen instance and score it on every rollout condition.

    Conditions per variant: seen/unseen x aux on/off. The score decoder is also
    rolled out on the seen suite with segmentation dropout ``dropout``.
    """
    say = progress or (lambda msg: log.info(msg))
    t0 = time.perf_counter()
    col = P.collect(cfg)
    ds = P.make_dataset(cfg, col)
    th = P.thresholds_from_collection(col)
    lengths = [rec.length for rec in col.trajectories]
    res = BenchmarkResult(th, {"trajectories": len(col.trajectories), "divergences": len(col.divergences),
                               "samples": len(ds), "mean_length": sum(lengths) / len(lengths)})
    res.dataset = ds
    res.timings["collect"] = time.perf_counter() - t0
    say(f"collected {len(col.trajectories)} trajectories, {len(ds)} samples, thresholds {th}")

    def suite(name, factory, instances, aux, noise=None):
        t = time.perf_counter()
        logs = P.rollout_suite(cfg, factory, instances, aux, th, noise, tags={"policy": name})
        k = key(name, instances, aux, "" if noise is None else f"dropout{noise.dropout_prob:g}")
        res.logs[k] = logs
        res.reports[k] = P.score(logs, th)
        res.timings[k] = time.perf_counter() - t
        r = res.reports[k]
        say(f"{k}: edge {r.edge_success_rate:.3f} object {r.object_success_rate:.3f} "
            f"({res.timings[k]:.0f}s)")

    if expert_reference:
        suite("ExpertOracle", ExpertOraclePolicy, "seen", True)
    for variant in variants:
        t = time.perf_counter()
        dcfg, params, curve = P.train_policy(cfg, ds, variant)
        name = VARIANT_NAMES[variant]
        res.policies[name] = (dcfg, params, curve)
        res.timings[f"train/{variant}"] = time.perf_counter() - t
        say(f"trained {name}: final loss {curve[-1]:.4f} ({res.timings[f'train/{variant}']:.0f}s)")
        factory = P.learned_policy_factory(dcfg, params)
        for instances in ("seen", "unseen"):
            for aux in (True, False):
                suite(name, factory, instances, aux)
        if variant == "score" and dropout is not None:
            base = cfg.rollout.seg_noise
            noisy = SegNoiseSpec(dropout, base.jitter_cells, base.flicker_prob, base.false_positive_prob)
            suite(name, factory, "seen", True, noisy)
    res.timings["total"] = time.perf_counter() - t0
    return res


def unseen_rates(cfg: RunConfig, ds, th: AuxThresholds, seed: int, setting: str = "edge") -> tuple[float, float]:
    """Retrain both decoders from ``seed``; (score, attention) success on the unseen suite with aux."""
    out = []
    for variant in ("score", "attention"):
        dcfg, params, _ = P.train_policy(cfg, ds, variant, seed=seed)
        logs = P.rollout_suite(cfg, P.learned_policy_factory(dcfg, params), "unseen", True, th)
        r = P.score(logs, th)
        out.append(r.edge_success_rate if setting == "edge" else r.object_success_rate)
    return out[0], out[1]
