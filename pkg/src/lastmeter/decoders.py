"""Score-matrix decoder and cross-attention baseline over masked, pooled tokens.

Masks and boxes come from the (frozen) segmentation stage and are constants as
far as gradients go; only the box MLP, the head MLP and, for the baseline, the
attention projections are trained.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .geometry import InvalidArgument
from .metrics import mask_com
from .sensors import FeatureGrid, SegmentationResult

POLICY_MAGIC = b"LMPD1"
BOX_FIELDS = 5


def crop_mask_pool(grid, seg: SegmentationResult, g: int, pool: str = "mean") -> np.ndarray:
    """Pool the masked patches inside the bbox onto a g x g lattice -> (g, g, D)."""
    data = grid.data if isinstance(grid, FeatureGrid) else np.asarray(grid)
    h, w, d = data.shape
    if seg.mask.shape != (h, w):
        raise InvalidArgument("mask shape does not match feature grid")
    out = np.zeros((g * g, d))
    if not seg.present:
        return out.reshape(g, g, d)
    r0, r1, c0, c1 = seg.cell_bounds()
    rows, cols = np.nonzero(seg.mask)
    gr = np.minimum(((rows - r0 + 0.5) * g / (r1 - r0)).astype(int), g - 1)
    gc = np.minimum(((cols - c0 + 0.5) * g / (c1 - c0)).astype(int), g - 1)
    cell = gr * g + gc
    vecs = data[rows, cols].astype(np.float64)
    if pool == "mean":
        np.add.at(out, cell, vecs)
        counts = np.bincount(cell, minlength=g * g)
        filled = counts > 0
        out[filled] /= counts[filled, None]
    elif pool == "max":
        out[:] = -np.inf
        np.maximum.at(out, cell, vecs)
        out[~np.isfinite(out).all(axis=1)] = 0.0
    else:
        raise InvalidArgument(f"unknown pooling {pool!r}")
    return out.reshape(g, g, d)


def _unit(tokens: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(tokens, axis=-1, keepdims=True)
    return np.divide(tokens, norm, out=np.zeros_like(tokens, dtype=np.float64), where=norm > 0)


def score_matrix(cur: np.ndarray, goal: np.ndarray) -> np.ndarray:
    """Cosine similarity between every current token (rows) and goal token (cols).

    Accepts (G, G, D) token grids or (K, D) token lists; zero tokens score 0.
    """
    cur = np.asarray(cur, dtype=np.float64)
    goal = np.asarray(goal, dtype=np.float64)
    if cur.shape != goal.shape:
        raise InvalidArgument("token grids differ in shape")
    d = cur.shape[-1]
    s = _unit(cur.reshape(-1, d)) @ _unit(goal.reshape(-1, d)).T
    return np.clip(s, -1.0, 1.0)


def box_row(seg: SegmentationResult) -> np.ndarray:
    return np.array([*seg.bbox, 1.0 if seg.present else 0.0])


def box_feature(cur_segs, goal_segs) -> np.ndarray:
    """Per-view (u_min, v_min, u_max, v_max, present) for current then goal views."""
    return np.concatenate([box_row(s) for s in (*cur_segs, *goal_segs)])


def featurize(features: np.ndarray, segs, g: int, pool: str = "mean") -> tuple[np.ndarray, np.ndarray]:
    """Tokens (V, g*g, D) float32 and box rows (V, 5) for one observation."""
    v, _, _, d = features.shape
    tokens = np.stack([crop_mask_pool(features[i], segs[i], g, pool).reshape(g * g, d) for i in range(v)])
    boxes = np.stack([box_row(s) for s in segs])
    return tokens.astype(np.float32), boxes.astype(np.float32)


@dataclass(frozen=True)
class DecoderConfig:
    variant: str = "score"
    grid: int = 8
    feature_dim: int = 32
    views: int = 4
    box_hidden: int = 64
    box_dim: int = 256
    head_hidden: tuple[int, ...] = (128, 64)
    attention_heads: int = 4
    pool: str = "mean"

    def __post_init__(self):
        if self.variant not in ("score", "attention"):
            raise InvalidArgument(f"unknown decoder variant {self.variant!r}")
        if self.variant == "attention" and self.feature_dim % self.attention_heads:
            raise InvalidArgument("feature_dim must be divisible by attention_heads")
        object.__setattr__(self, "head_hidden", tuple(self.head_hidden))

    @property
    def tokens(self) -> int:
        return self.grid * self.grid

    @property
    def box_spec(self) -> nn.NetSpec:
        return nn.NetSpec.mlp([2 * self.views * BOX_FIELDS, self.box_hidden, self.box_dim],
                              out_activation="relu")

    @property
    def head_input(self) -> int:
        if self.variant == "score":
            return self.views * self.tokens ** 2 + self.box_dim
        return self.views * self.feature_dim + self.box_dim

    @property
    def head_spec(self) -> nn.NetSpec:
        return nn.NetSpec.mlp([self.head_input, *self.head_hidden, nn.N_HEADS * nn.N_CLASSES])

    @property
    def attention_spec(self) -> nn.NetSpec:
        d = self.feature_dim
        return nn.NetSpec(tuple(nn.LayerSpec(d, d, "identity") for _ in range(4)))

    def subnets(self) -> dict[str, nn.NetSpec]:
        nets = {"box": self.box_spec, "head": self.head_spec}
        if self.variant == "attention":
            nets["att"] = self.attention_spec
        return nets


def init_decoder(cfg: DecoderConfig, rng: np.random.Generator) -> nn.ParameterSet:
    params = {}
    for name, spec in cfg.subnets().items():
        params.update(nn.init_params(spec, rng, prefix=name))
    return params


def _check_inputs(cfg: DecoderConfig, cur: np.ndarray, goal: np.ndarray, boxes: np.ndarray):
    want = (cfg.views, cfg.tokens, cfg.feature_dim)
    if cur.shape[1:] != want or goal.shape[1:] != want:
        raise InvalidArgument(f"token batch shape {cur.shape[1:]} / {goal.shape[1:]} != {want}")
    if boxes.shape[1:] != (2 * cfg.views * BOX_FIELDS,):
        raise InvalidArgument(f"box batch shape {boxes.shape[1:]} invalid")


def batch_score_matrices(cur: np.ndarray, goal: np.ndarray) -> np.ndarray:
    """(B, V, K, D) x (B, V, K, D) -> (B, V, K, K) cosine scores."""
    s = _unit(np.asarray(cur, dtype=np.float64)) @ np.swapaxes(_unit(np.asarray(goal, dtype=np.float64)), -1, -2)
    return np.clip(s, -1.0, 1.0)


def _attend_forward(params, cfg: DecoderConfig, cur: np.ndarray, goal: np.ndarray):
    """Multi-head cross-attention, current tokens as queries over goal tokens.

    Zero tokens (outside the mask) are excluded as keys and from the final mean.
    """
    x = np.asarray(cur, dtype=np.float64)
    y = np.asarray(goal, dtype=np.float64)
    b, v, k, d = x.shape
    h = cfg.attention_heads
    dk = d // h
    wq, bq = params["att.0.W"], params["att.0.b"]
    wk, bk = params["att.1.W"], params["att.1.b"]
    wv, bv = params["att.2.W"], params["att.2.b"]
    wo, bo = params["att.3.W"], params["att.3.b"]

    def split(t):
        return t.reshape(b, v, k, h, dk).transpose(0, 1, 3, 2, 4)

    q = split(x @ wq.T + bq)
    kk = split(y @ wk.T + bk)
    vv = split(y @ wv.T + bv)
    key_ok = np.any(y != 0.0, axis=-1)  # (B, V, K)
    qry_ok = np.any(x != 0.0, axis=-1)
    logits = q @ np.swapaxes(kk, -1, -2) / math.sqrt(dk)  # (B, V, h, K, K)
    logits = np.where(key_ok[:, :, None, None, :], logits, -np.inf)
    row_max = logits.max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.exp(logits - row_max)
    denom = e.sum(axis=-1, keepdims=True)
    p = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)
    a = (p @ vv).transpose(0, 1, 3, 2, 4).reshape(b, v, k, d)
    o = a @ wo.T + bo
    count = np.maximum(qry_ok.sum(axis=-1, keepdims=True), 1)
    weight = qry_ok / count  # (B, V, K)
    pooled = (o * weight[..., None]).sum(axis=2)  # (B, V, D)
    cache = (x, y, q, kk, vv, p, a, weight, dk)
    return pooled, cache


def _attend_backward(params, cfg: DecoderConfig, cache, dpooled: np.ndarray):
    x, y, q, kk, vv, p, a, weight, dk = cache
    b, v, k, d = x.shape
    h = cfg.attention_heads
    do = dpooled[:, :, None, :] * weight[..., None]  # (B, V, K, D)
    g = {}
    g["att.3.W"] = do.reshape(-1, d).T @ a.reshape(-1, d)
    g["att.3.b"] = do.sum(axis=(0, 1, 2))
    da = (do @ params["att.3.W"]).reshape(b, v, k, h, dk).transpose(0, 1, 3, 2, 4)
    dp = da @ np.swapaxes(vv, -1, -2)
    dvv = np.swapaxes(p, -1, -2) @ da
    ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) / math.sqrt(dk)
    dq = ds @ kk
    dkk = np.swapaxes(ds, -1, -2) @ q

    def merge(t):
        return t.transpose(0, 1, 3, 2, 4).reshape(b, v, k, d)

    for idx, (dt, src) in enumerate(((merge(dq), x), (merge(dkk), y), (merge(dvv), y))):
        g[f"att.{idx}.W"] = dt.reshape(-1, d).T @ src.reshape(-1, d)
        g[f"att.{idx}.b"] = dt.sum(axis=(0, 1, 2))
    return g


def decoder_forward(params, cfg: DecoderConfig, cur: np.ndarray, goal: np.ndarray, boxes: np.ndarray):
    """Batched logits (B, 9) and a cache for :func:`decoder_backward`."""
    _check_inputs(cfg, cur, goal, boxes)
    e_box, box_tape = nn.mlp_forward(params, cfg.box_spec, np.asarray(boxes, dtype=np.float64), "box")
    b = cur.shape[0]
    if cfg.variant == "score":
        relation = batch_score_matrices(cur, goal).reshape(b, -1)
        att_cache = None
    else:
        pooled, att_cache = _attend_forward(params, cfg, cur, goal)
        relation = pooled.reshape(b, -1)
    head_in = np.concatenate([relation, e_box], axis=1)
    logits, head_tape = nn.mlp_forward(params, cfg.head_spec, head_in, "head")
    return logits, (box_tape, head_tape, att_cache, relation.shape[1])


def decoder_backward(params, cfg: DecoderConfig, cache, dlogits: np.ndarray) -> nn.ParameterSet:
    box_tape, head_tape, att_cache, n_rel = cache
    grads, dhead_in = nn.mlp_backward(params, cfg.head_spec, head_tape, dlogits, "head", need_input_grad=True)
    box_grads, _ = nn.mlp_backward(params, cfg.box_spec, box_tape, dhead_in[:, n_rel:], "box")
    grads.update(box_grads)
    if cfg.variant == "attention":
        b = dlogits.shape[0]
        dpooled = dhead_in[:, :n_rel].reshape(b, cfg.views, cfg.feature_dim)
        grads.update(_attend_backward(params, cfg, att_cache, dpooled))
    return grads


def decoder_loss_and_grad(params, cfg: DecoderConfig, cur, goal, boxes, labels):
    logits, cache = decoder_forward(params, cfg, cur, goal, boxes)
    loss, dlogits = nn.bc_loss(logits, labels)
    return loss, decoder_backward(params, cfg, cache, dlogits)


@dataclass
class PolicyOutput:
    logits: np.ndarray  # (9,)
    aux_stats: dict = field(default_factory=dict)


def segmentation_stats(segs) -> dict:
    """Per-view bbox area and mask centre of mass (None when absent)."""
    stats = {}
    for s in segs:
        stats[s.view] = {
            "present": bool(s.present),
            "area": float(s.area),
            "com": list(mask_com(s.mask)) if s.present else None,
        }
    return stats


def _forward_obs(cfg, params, cur_obs, goal_obs, cur_segs, goal_segs) -> PolicyOutput:
    if cur_obs.features.shape[-1] != cfg.feature_dim:
        raise InvalidArgument("observation feature dim does not match decoder")
    cur_tok, _ = featurize(cur_obs.features, cur_segs, cfg.grid, cfg.pool)
    goal_tok, _ = featurize(goal_obs.features, goal_segs, cfg.grid, cfg.pool)
    boxes = box_feature(cur_segs, goal_segs)
    logits, _ = decoder_forward(params, cfg, cur_tok[None], goal_tok[None], boxes[None])
    return PolicyOutput(logits[0], segmentation_stats(cur_segs))


def dino_score_forward(cur_obs, goal_obs, cur_segs, goal_segs, params, cfg: DecoderConfig) -> PolicyOutput:
    if cfg.variant != "score":
        raise InvalidArgument("config is not a score decoder")
    return _forward_obs(cfg, params, cur_obs, goal_obs, cur_segs, goal_segs)


def dino_attention_forward(cur_obs, goal_obs, cur_segs, goal_segs, params, cfg: DecoderConfig) -> PolicyOutput:
    if cfg.variant != "attention":
        raise InvalidArgument("config is not an attention decoder")
    return _forward_obs(cfg, params, cur_obs, goal_obs, cur_segs, goal_segs)


def select_action_indices(logits: np.ndarray) -> tuple[int, int, int]:
    """Argmax per head; exact ties resolve to the zero (middle) level."""
    z = np.asarray(logits).reshape(nn.N_HEADS, nn.N_CLASSES)
    out = []
    for row in z:
        best = row.max()
        out.append(1 if row[1] == best else int(np.argmax(row)))
    return tuple(out)


class LearnedPolicy:
    """Wraps decoder parameters behind the rollout policy interface."""

    def __init__(self, cfg: DecoderConfig, params: nn.ParameterSet):
        self.cfg = cfg
        self.params = params
        self._goal = None

    @property
    def name(self) -> str:
        return "DinoScore" if self.cfg.variant == "score" else "DinoAttention"

    def reset(self, goal_obs, goal_segs, goal_pose=None) -> None:
        tok, box = featurize(goal_obs.features, goal_segs, self.cfg.grid, self.cfg.pool)
        self._goal = (tok, box)

    def __call__(self, obs, segs) -> PolicyOutput:
        if self._goal is None:
            raise RuntimeError("policy.reset must be called with a goal observation first")
        if obs.features.shape[-1] != self.cfg.feature_dim:
            raise InvalidArgument("observation feature dim does not match decoder")
        tok, box = featurize(obs.features, segs, self.cfg.grid, self.cfg.pool)
        boxes = np.concatenate([box.ravel(), self._goal[1].ravel()])
        logits, _ = decoder_forward(self.params, self.cfg, tok[None], self._goal[0][None], boxes[None])
        return PolicyOutput(logits[0], segmentation_stats(segs))


def save_policy(path: Path, cfg: DecoderConfig, params: nn.ParameterSet, meta: dict | None = None) -> None:
    nets = cfg.subnets()
    desc = {"decoder": asdict(cfg), "subnets": list(nets), "meta": meta or {}}
    blob = json.dumps(desc, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(POLICY_MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for name, spec in nets.items():
        nn.write_net(buf, spec, params, prefix=name)
    Path(path).write_bytes(buf.getvalue())


def load_policy(path: Path) -> tuple[DecoderConfig, nn.ParameterSet, dict]:
    with open(path, "rb") as fh:
        if fh.read(len(POLICY_MAGIC)) != POLICY_MAGIC:
            raise ValueError(f"{path}: not a policy checkpoint")
        (n,) = struct.unpack("<I", fh.read(4))
        desc = json.loads(fh.read(n))
        cfg = DecoderConfig(**desc["decoder"])
        params = {}
        for name in desc["subnets"]:
            spec, p = nn.read_net(fh, prefix=name)
            if spec != cfg.subnets()[name]:
                raise ValueError(f"{path}: subnet {name} does not match descriptor")
            params.update(p)
    return cfg, params, desc.get("meta", {})


def random_gradcheck_config(rng: np.random.Generator, variant: str) -> DecoderConfig:
    """A small random decoder shape for finite-difference checks."""
    heads = int(rng.choice([1, 2]))
    return DecoderConfig(
        variant=variant,
        grid=int(rng.integers(1, 4)),
        feature_dim=heads * int(rng.integers(2, 5)),
        views=int(rng.integers(1, 5)),
        box_hidden=int(rng.integers(2, 6)),
        box_dim=int(rng.integers(2, 6)),
        head_hidden=tuple(int(n) for n in rng.integers(3, 8, size=int(rng.integers(1, 3)))),
        attention_heads=heads,
    )


def gradient_check(cfg: DecoderConfig, rng: np.random.Generator, batch: int = 3, h: float = 1e-5) -> float:
    """Relative error between backprop and central differences for random inputs and labels."""
    params = init_decoder(cfg, rng)
    for k in params:
        if k.endswith(".b"):
            params[k] = rng.normal(0.0, 0.1, params[k].shape)
    shape = (batch, cfg.views, cfg.tokens, cfg.feature_dim)
    cur = rng.normal(size=shape) * (rng.random(shape[:3] + (1,)) > 0.2)
    goal = rng.normal(size=shape)
    boxes = rng.random((batch, 2 * cfg.views * BOX_FIELDS))
    labels = rng.integers(0, nn.N_CLASSES, size=(batch, nn.N_HEADS))
    _, analytic = decoder_loss_and_grad(params, cfg, cur, goal, boxes, labels)

    def loss():
        logits, _ = decoder_forward(params, cfg, cur, goal, boxes)
        return nn.bc_loss(logits, labels)[0]

    return nn.gradient_relative_error(analytic, nn.numeric_gradient(loss, params, h))
