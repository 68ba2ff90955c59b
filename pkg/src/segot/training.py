"""Assignment loss, exact gradients through unrolled Sinkhorn, AdamW and the head training loop."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from segot.errors import NumericError, ValidationError
from segot.features import HeadParams, aggregate_sum, head_backward, head_forward
from segot.matcher import (
    DEFAULT_ALPHA,
    MatcherConfig,
    TransportPlan,
    augment_dustbin,
    dustbin_weights,
    l2_normalize,
    sinkhorn_iterates,
)
from segot.structures import GtAssignment, MaskSet
from segot.synth import SceneConfig, gen_pair
from segot.tensor_io import atomic_write, load_tensor, save_tensor, write_json

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-30
LR0 = 1e-4
LR_MIN = 1e-6
WEIGHT_DECAY = 1e-4
# 2000 desk-scale steps at LR0 stall near 40% of the initial loss
DESK_LR0 = 1e-3


def _gt_cells(gt: GtAssignment, m1: int, m2: int):
    """Plan cells (rows, cols) addressed by the three sums of the loss."""
    gt.check_bounds(m1, m2)
    rows = [i for i, _ in gt.matches] + list(gt.unmatched_a) + [m1] * len(gt.unmatched_b)
    cols = [j for _, j in gt.matches] + [m2] * len(gt.unmatched_a) + list(gt.unmatched_b)
    return np.array(rows, dtype=int), np.array(cols, dtype=int)


def assignment_loss(plan: TransportPlan, gt: GtAssignment) -> float:
    """Negative log-likelihood of the ground-truth cells under the plan's masses.

    Dustbin cells use the total mass sent to the dustbin (see ``TransportPlan.masses``).
    """
    rows, cols = _gt_cells(gt, plan.m1, plan.m2)
    if rows.size == 0:
        return 0.0
    p = np.clip(plan.masses()[rows, cols], LOG_FLOOR, 1.0)
    return float(-np.log(p).sum())


def loss_backward(St, gt: GtAssignment, tau, iterations):
    """Loss and exact gradients w.r.t. the augmented affinity and the dustbin logit.

    Reverse-mode through every row/column log-normalization of the forward pass.
    """
    St = np.asarray(St, dtype=np.float64)
    m1, m2 = St.shape[0] - 1, St.shape[1] - 1
    rows, cols = _gt_cells(gt, m1, m2)
    Z, history = sinkhorn_iterates(St, tau, iterations)
    r, c = dustbin_weights(m1, m2)
    if rows.size == 0:
        return 0.0, np.zeros_like(St), 0.0

    log_mass = Z[rows, cols] + np.log(r[rows] * c[cols])
    log_p = np.clip(log_mass, math.log(LOG_FLOOR), 0.0)
    loss = float(-log_p.sum())

    g = np.zeros_like(Z)
    live = (log_mass > math.log(LOG_FLOOR)) & (log_mass < 0.0)
    np.add.at(g, (rows[live], cols[live]), -1.0)

    # history[2t+1] is the row-normalized iterate Y; its column normalization produced W.
    outputs = history[1:] + [Z]
    for t in range(iterations - 1, -1, -1):
        W = outputs[2 * t + 1]
        g = g - (r[:, None] * np.exp(W)) * g.sum(0, keepdims=True)
        Y = outputs[2 * t]
        g = g - (c[None, :] * np.exp(Y)) * g.sum(1, keepdims=True)
    g_St = g / tau
    g_alpha = float(g_St[-1, :].sum() + g_St[:-1, -1].sum())
    if not (np.all(np.isfinite(g_St)) and math.isfinite(loss)):
        raise NumericError("non-finite loss or gradient")
    return loss, g_St, g_alpha


def cosine_lr(step, total_steps, lr0=LR0, lr_min=LR_MIN) -> float:
    """Cosine annealing without restarts from lr0 down to lr_min."""
    if total_steps <= 0:
        return lr_min
    step = min(max(step, 0), total_steps)
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class OptimState:
    lr0: float = LR0
    lr_min: float = LR_MIN
    weight_decay: float = WEIGHT_DECAY
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    total_steps: int = 1
    step: int = 0
    no_decay: tuple = ("alpha",)
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: OptimState) -> dict:
    """One decoupled-weight-decay Adam update; returns new parameter arrays, mutates ``state``."""
    lr = cosine_lr(state.step, state.total_steps, state.lr0, state.lr_min)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        p = np.asarray(p, dtype=np.float64)
        if g.shape != p.shape:
            raise ValidationError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1**state.step)
        v_hat = v / (1 - b2**state.step)
        if name not in state.no_decay:
            p = p * (1 - lr * state.weight_decay)
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out


# ---------------------------------------------------------------------------
# end-to-end gradients for the head


def _normalize_backward(Gn, norms, g):
    safe = np.where(norms > 0, norms, 1.0)
    out = (g - Gn * (Gn * g).sum(1, keepdims=True)) / safe[:, None]
    out[norms == 0] = 0.0
    return out


def compact_gt(gt: GtAssignment, valid_a, valid_b) -> GtAssignment:
    """Re-index a slot-indexed ground truth onto valid segments only."""
    pos_a = {int(s): k for k, s in enumerate(np.flatnonzero(valid_a))}
    pos_b = {int(s): k for k, s in enumerate(np.flatnonzero(valid_b))}
    return GtAssignment(
        tuple((pos_a[i], pos_b[j]) for i, j in gt.matches if i in pos_a and j in pos_b),
        tuple(pos_a[i] for i in gt.unmatched_a if i in pos_a),
        tuple(pos_b[j] for j in gt.unmatched_b if j in pos_b),
    )


def pair_loss_and_grads(params: HeadParams, alpha, patches_a, patches_b, masks_a, masks_b,
                        gt: GtAssignment, config: MatcherConfig = MatcherConfig()):
    """Loss of one pair and gradients for every head array plus ``alpha``."""
    masks_a = masks_a if isinstance(masks_a, MaskSet) else MaskSet(masks_a)
    masks_b = masks_b if isinstance(masks_b, MaskSet) else MaskSet(masks_b)
    fa, cache_a = head_forward(patches_a, params, return_cache=True)
    fb, cache_b = head_forward(patches_b, params, return_cache=True)
    if fa.shape[:2] != masks_a.hw or fb.shape[:2] != masks_b.hw:
        raise ValidationError(f"head output {fa.shape[:2]}/{fb.shape[:2]} does not match masks "
                              f"{masks_a.hw}/{masks_b.hw}")
    da, db = aggregate_sum(fa, masks_a), aggregate_sum(fb, masks_b)
    A, ia = da.compact()
    B, ib = db.compact()
    if config.normalize:
        An, na = l2_normalize(A)
        Bn, nb = l2_normalize(B)
    else:
        An, Bn = A, B
    St = augment_dustbin(An @ Bn.T, alpha)
    gt_c = compact_gt(gt, da.valid, db.valid)
    loss, g_St, g_alpha = loss_backward(St, gt_c, config.tau, config.iterations)

    g_S = g_St[:-1, :-1]
    gA, gB = g_S @ Bn, g_S.T @ An
    if config.normalize:
        gA = _normalize_backward(An, na, gA)
        gB = _normalize_backward(Bn, nb, gB)

    grads = {}
    for fmap, masks, idx, gG, cache in ((fa, masks_a, ia, gA, cache_a), (fb, masks_b, ib, gB, cache_b)):
        m_flat = masks.masks[idx].reshape(len(idx), -1).astype(np.float64)
        g_fmap = (m_flat.T @ gG).reshape(fmap.shape)
        for name, g in head_backward(g_fmap, params, cache).items():
            grads[name] = grads.get(name, 0.0) + g
    grads["alpha"] = np.float64(g_alpha)
    return loss, grads


def batch_loss_and_grads(params, alpha, pairs, config: MatcherConfig = MatcherConfig()):
    """Sum of per-pair losses and gradients, reduced in list order."""
    total, acc = 0.0, None
    for p in pairs:
        loss, grads = pair_loss_and_grads(params, alpha, p.patches_a, p.patches_b, p.masks_a, p.masks_b,
                                          p.gt, config)
        total += loss
        acc = grads if acc is None else {k: acc[k] + grads[k] for k in acc}
    return total, acc


# ---------------------------------------------------------------------------
# training loop


def desk_scene() -> SceneConfig:
    """Synthetic scene used for desk-scale head training."""
    return SceneConfig(height=32, width=32, min_segments=6, max_segments=12, layout="voronoi",
                       latent_dim=32, signal_dim=8, noise=0.5, nuisance=2.0, drop=0.2, patch_size=2)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    epochs: int = 20
    seed: int = 0
    dim_out: int = 24
    hidden: int | None = None
    lr0: float = DESK_LR0
    lr_min: float = LR_MIN
    weight_decay: float = WEIGHT_DECAY
    alpha_init: float = DEFAULT_ALPHA
    train_pairs: int = 2000
    matcher: MatcherConfig = field(default_factory=MatcherConfig)
    scene: SceneConfig = field(default_factory=desk_scene)

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.train_pairs < 1:
            raise ValidationError("steps must be >= 0, batch size and pair count >= 1")


@dataclass
class TrainResult:
    params: HeadParams
    alpha: float
    trace: list = field(default_factory=list)

    def mean_loss(self, start, stop):
        losses = [row["loss"] for row in self.trace[start:stop]]
        return float(np.mean(losses))


def train_head(config: TrainConfig = TrainConfig(), on_step=None) -> TrainResult:
    """Train the head and dustbin logit on synthetic pairs; deterministic given ``config.seed``.

    Pairs are drawn from a fixed pool of ``train_pairs`` seeds, reshuffled every pass.
    """
    scene = config.scene
    params = HeadParams.init(scene.latent_dim, config.dim_out, scene.patch_size, config.hidden, seed=config.seed)
    alpha = float(config.alpha_init)
    state = OptimState(lr0=config.lr0, lr_min=config.lr_min, weight_decay=config.weight_decay,
                       total_steps=config.steps)
    rng = np.random.default_rng([config.seed, 7])
    cache: dict[int, object] = {}
    order = np.array([], dtype=int)
    trace = []
    for step in range(config.steps):
        if order.size < config.batch_size:
            order = np.concatenate([order, rng.permutation(config.train_pairs)])
        ids, order = order[: config.batch_size], order[config.batch_size :]
        batch = []
        for k in ids:
            if int(k) not in cache:
                cache[int(k)] = gen_pair(scene, seed=int(k)).pair
            batch.append(cache[int(k)])
        lr = cosine_lr(state.step, state.total_steps, state.lr0, state.lr_min)
        loss, grads = batch_loss_and_grads(params, alpha, batch, config.matcher)
        loss /= len(batch)
        if not math.isfinite(loss):
            raise NumericError(f"loss diverged at step {step}")
        grads = {k: v / len(batch) for k, v in grads.items()}
        current = params.arrays() | {"alpha": np.float64(alpha)}
        updated = adamw_step(current, grads, state)
        alpha = float(updated.pop("alpha"))
        params = params.replace(**updated)
        row = {"step": step, "lr": lr, "loss": loss}
        trace.append(row)
        if on_step is not None:
            on_step(row)
    return TrainResult(params, alpha, trace)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(directory, params: HeadParams, alpha, seed=0, steps=0):
    directory = Path(directory)
    for name, arr in params.arrays().items():
        save_tensor(directory / f"{name}.sgt", np.asarray(arr, dtype=np.float32).reshape(np.shape(arr) or (1,)))
    save_tensor(directory / "alpha.sgt", np.array([alpha], dtype=np.float32))
    meta = {"dim_in": params.dim_in, "hidden": params.hidden, "patch_size": params.patch_size,
            "dim_out": params.dim_out, "seed": seed, "steps": steps, "alpha": float(alpha)}
    write_json(directory / "meta.json", meta)


def load_checkpoint(directory):
    directory = Path(directory)
    with open(directory / "meta.json") as fh:
        meta = json.load(fh)
    arrays = {n: load_tensor(directory / f"{n}.sgt").astype(np.float64) for n in HeadParams.NAMES}
    params = HeadParams(**arrays, patch_size=int(meta["patch_size"]), dim_out=int(meta["dim_out"]))
    if (params.dim_in, params.hidden) != (meta["dim_in"], meta["hidden"]):
        raise ValidationError("checkpoint tensors disagree with meta.json")
    alpha = float(load_tensor(directory / "alpha.sgt")[0])
    return params, alpha, meta


def write_trace(path, trace):
    with atomic_write(path, "w") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "lr", "loss"])
        writer.writeheader()
        for row in trace:
            writer.writerow({"step": row["step"], "lr": repr(row["lr"]), "loss": repr(row["loss"])})


def config_to_json(config: TrainConfig) -> dict:
    return asdict(config)
