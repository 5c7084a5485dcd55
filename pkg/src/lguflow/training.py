"""Losses and the unrolled toy training loop over synthetic scenes.

The batch runs as one row-stacked forward (samples stay block-independent),
which halves the python-side op count versus per-sample passes; the kernels
parallelize internally. Everything uses fixed summation orders, so training
is bit-identical for a fixed seed and thread count.
"""

from __future__ import annotations

import logging
import os
import time

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, ContractError, Node, backward, clip_global_norm
from .gaussian import GaussianField
from .geometry import SceneSample, grid_coords
from .model import MatchingModel
from .tensor import save_tensor

log = logging.getLogger(__name__)

ITER_DECAY = 0.9
LAMBDA_FLOW = 0.05
LAMBDA_SELF = 0.08
CLIP_NORM = 1.0


class NumericAbort(RuntimeError):
    """Raised when training hits a non-finite loss; carries the dump directory."""

    def __init__(self, message, dump_dir=None):
        super().__init__(message)
        self.dump_dir = dump_dir


def flow_loss(flows, gt_flow: np.ndarray, valid: np.ndarray,
              gamma: float = ITER_DECAY) -> Node:
    """Exponentially weighted per-iteration L1: sum_t gamma^(N-t) * mean|err|_1.

    The per-pixel L1 norm sums the two components; the mean runs over valid
    pixels only.
    """
    valid = np.asarray(valid).reshape(-1)
    count = int(valid.sum())
    if count == 0:
        raise ContractError("flow_loss: empty valid mask")
    n = len(flows)
    dtype = flows[0].value.dtype
    w = (valid.astype(np.float64) / count).astype(dtype)[:, None]
    gt = ad.constant(np.asarray(gt_flow, dtype=dtype).reshape(-1, 2))
    weights = ad.constant(w)
    total = None
    for t, f in enumerate(flows, start=1):
        term = ad.reduce_sum(ad.mul(ad.absolute(ad.sub(f, gt)), weights))
        term = ad.mul(term, float(gamma ** (n - t)))
        total = term if total is None else ad.add(total, term)
    return total


def self_supervised_loss(field: GaussianField, target: np.ndarray) -> Node:
    """Uncertainty-weighted alignment of the Gaussian expectations.

    target carries stop-gradient (it is passed by value). Residuals are
    normalized by H*W*2*det per pixel and summed; the half-log-det term is
    averaged over pixels.
    """
    H, W = field.H, field.W
    dtype = field.mu.value.dtype
    tgt = ad.constant(np.asarray(target, dtype=dtype).reshape(-1, 2))
    ex = ad.slice_axis(field.cov, 1, 0, 1)
    ey = ad.slice_axis(field.cov, 1, 1, 2)
    det = ad.mul(ex, ey)
    diff = ad.sub(field.mu, tgt)
    resid2 = ad.reduce_sum(ad.mul(diff, diff), axis=1, keepdims=True)
    term1 = ad.reduce_sum(ad.div(resid2, ad.mul(det, float(H * W * 2))))
    term2 = ad.reduce_mean(ad.mul(ad.log(det), 0.5))
    return ad.add(term1, term2)


_notice_emitted = False


def total_loss(l_flow: Node | None, l_self: Node | None,
               lambda_flow: float = LAMBDA_FLOW,
               lambda_self: float = LAMBDA_SELF) -> Node:
    """Weighted sum of the in-scope loss terms.

    The pose and residual terms of the full system belong to the bundle
    adjustment layer and contribute zero here; a notice is logged once.
    """
    global _notice_emitted
    if not _notice_emitted:
        log.info("pose/residual loss terms are out of scope (no bundle adjustment); "
                 "they contribute 0 to the total loss")
        _notice_emitted = True
    total = None
    if l_flow is not None:
        total = ad.mul(l_flow, float(lambda_flow))
    if l_self is not None:
        scaled = ad.mul(l_self, float(lambda_self))
        total = scaled if total is None else ad.add(total, scaled)
    if total is None:
        raise ContractError("total_loss: no loss components")
    return total


def epe(flow, gt_flow: np.ndarray, valid: np.ndarray) -> float:
    """Mean end-point error (Euclidean, pixels) over valid pixels."""
    f = flow.value if isinstance(flow, Node) else np.asarray(flow)
    f = f.reshape(-1, 2).astype(np.float64)
    gt = np.asarray(gt_flow, dtype=np.float64).reshape(-1, 2)
    v = np.asarray(valid).reshape(-1)
    err = np.linalg.norm(f - gt, axis=1)
    return float(err[v].mean())


def _ablations(kw: dict) -> dict:
    return {k: bool(kw.get(k, False)) for k in ("no_lgu", "no_deform", "no_kan")}


def sample_losses(model: MatchingModel, sample, iterations: int,
                  gamma: float, lambda_flow: float, lambda_self: float,
                  workspace: bool = False, **ablations):
    """Forward pass plus losses for one sample or a batch list.

    Batched samples share the stacked forward; losses are computed per sample
    on row slices and summed (identical gradient semantics to sequential
    accumulation). Returns (total, parts dict, out dict); parts are averaged
    over the batch.
    """
    samples = sample if isinstance(sample, (list, tuple)) else [sample]
    B = len(samples)
    out = model.forward(samples, iterations=iterations, workspace=workspace,
                        **_ablations(ablations))
    hw = model.H * model.W
    total = None
    sums = {"l_flow": 0.0, "l_self": 0.0, "epe": 0.0}
    for b, s in enumerate(samples):
        flows_b = [ad.slice_axis(f, 0, b * hw, (b + 1) * hw) for f in out["flows"]]
        lf = flow_loss(flows_b, s.flow, s.valid, gamma=gamma)
        ls = None
        if out["field"] is not None:
            field = out["field"]
            field_b = GaussianField(
                mu=ad.slice_axis(field.mu, 0, b * hw, (b + 1) * hw),
                cov=ad.slice_axis(field.cov, 0, b * hw, (b + 1) * hw),
                base=field.base[b * hw:(b + 1) * hw], H=model.H, W=model.W)
            target = model.grid + flows_b[-1].value  # stop-gradient by value
            ls = self_supervised_loss(field_b, target)
        total_b = total_loss(lf, ls, lambda_flow, lambda_self)
        total = total_b if total is None else ad.add(total, total_b)
        sums["l_flow"] += float(lf.value)
        sums["l_self"] += float(ls.value) if ls is not None else 0.0
        sums["epe"] += epe(flows_b[-1], s.flow, s.valid)
    parts = {
        "l_flow": sums["l_flow"] / B,
        "l_self": sums["l_self"] / B,
        "total": float(total.value) / B,
        "epe": sums["epe"] / B,
    }
    return total, parts, out


def _dump_batch(out_dir, step, scenes):
    dump = os.path.join(out_dir, f"abort_step{step:06d}")
    os.makedirs(dump, exist_ok=True)
    for i, s in enumerate(scenes):
        save_tensor(s.f_i.astype(np.float64), os.path.join(dump, f"sample{i}_f_i.lgut"))
        save_tensor(s.f_j.astype(np.float64), os.path.join(dump, f"sample{i}_f_j.lgut"))
        save_tensor(s.flow, os.path.join(dump, f"sample{i}_flow.lgut"))
    return dump


def train(cfg, corpus, model: MatchingModel | None = None, on_report=None,
          checkpoint_dir=None, **ablations):
    """Unrolled training: batched forward/backward, clipped Adam steps.

    Deterministic for a fixed seed and thread count: batches come from a
    seed-derived stream and every kernel uses a fixed summation order.
    Returns (model, reports).
    """
    if model is None:
        model = MatchingModel.from_config(cfg)
    opt = Adam(model.store.nodes(), lr=cfg.lr)
    batch_rng = np.random.default_rng(np.random.SeedSequence((int(cfg.seed), 0xBA7C4)))
    reports = []
    abl = _ablations(ablations)
    for step in range(1, cfg.steps + 1):
        t0 = time.perf_counter()
        model.store.zero_grad()
        idxs = batch_rng.integers(0, len(corpus), size=cfg.batch)
        batch = [corpus[int(i)] for i in idxs]
        total, parts, _ = sample_losses(
            model, batch, cfg.iterations, cfg.gamma,
            cfg.lambda_flow, cfg.lambda_self, workspace=True, **abl)
        if not np.isfinite(parts["total"]):
            dump = _dump_batch(cfg.out_dir, step, batch) if cfg.out_dir else None
            raise NumericAbort(f"non-finite loss at step {step}", dump_dir=dump)
        backward(total)
        clip_global_norm(model.store.nodes(), CLIP_NORM)
        opt.step()
        report = {
            "step": step,
            "l_flow": parts["l_flow"],
            "l_self": parts["l_self"],
            "total": parts["total"],
            "epe": parts["epe"],
            "lr": cfg.lr,
            "wall_ms": (time.perf_counter() - t0) * 1e3,
        }
        reports.append(report)
        if on_report is not None:
            on_report(report)
        if checkpoint_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            model.store.save_checkpoint(
                os.path.join(checkpoint_dir, f"step{step:06d}"), step=step)
    if checkpoint_dir:
        model.store.save_checkpoint(os.path.join(checkpoint_dir, "final"), step=cfg.steps)
    return model, reports


def evaluate(model: MatchingModel, scenes, iterations: int = 8, **ablations) -> dict:
    """Forward-only EPE over a scene list; returns per-scene and mean EPE."""
    abl = _ablations(ablations)
    per_scene = []
    for sample in scenes:
        out = model.forward(sample, iterations=iterations, workspace=True, **abl)
        per_scene.append(epe(out["flows"][-1], sample.flow, sample.valid))
    return {"per_scene": per_scene, "mean_epe": float(np.mean(per_scene))}
