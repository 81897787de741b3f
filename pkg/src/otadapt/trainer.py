"""Full training loop: pseudo-label, solve the plan, identify, step.

Each epoch assigns the candidate role by scenario (open set: candidates
are the target samples; partial: candidates are the source samples),
solves one masked semi-relaxed plan over the full batch, splits it by the
identification result, and takes one clipped momentum step on the
combined objective.  Everything is deterministic under a fixed seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from .data_gen import LabeledFeatureSet
from .identification import (
    IdentificationResult,
    compute_scores,
    identify,
    split_plan,
    transpose_plan,
)
from .metrics import bound_terms, collapse_labels, eval_osda, eval_pda, ident_metrics
from .model import (
    AdaptModel,
    ModelDims,
    SgdMomentum,
    forward_classify,
    forward_features,
    load_checkpoint,
    save_checkpoint,
)
from .ot_solver import (
    CostSpec,
    Histogram,
    TransportPlan,
    label_mask,
    solve_masked_semirelaxed,
    squared_distances,
)

DEFAULT_ETAS = {"osda": (1.0, 1.0), "pda": (0.3, 3.5)}
# candidate columns are many and subtle in the partial scenario; a sharper
# kernel keeps their mass contrast while the open-set side prefers the
# flatter kernel that avoids starving outlying shared columns
DEFAULT_LAMBDAS = {"osda": 0.1, "pda": 0.05}


@dataclass
class TaskConfig:
    scenario: str
    n_source_classes: int
    n_shared_classes: int
    lam: float | None = None
    beta2: float = 0.05
    eta1: float | None = None
    eta2: float | None = None
    epochs: int = 200
    lr: float = 1e-2
    momentum: float = 0.9
    grad_clip: float = 5.0
    seed: int = 0
    pretrain_epochs: int = 100
    pretrain_lr: float | None = None
    g_hidden: int = 64
    g_out: int = 16

    def __post_init__(self):
        if self.scenario not in ("osda", "pda"):
            raise ValueError("scenario must be 'osda' or 'pda'")
        if self.scenario == "osda" and self.n_source_classes != self.n_shared_classes:
            raise ValueError(
                "open-set tasks share the whole source label space"
            )
        if self.scenario == "pda" and self.n_source_classes <= self.n_shared_classes:
            raise ValueError(
                "partial tasks need source-only classes beyond the shared ones"
            )
        if self.n_shared_classes < 1:
            raise ValueError("need at least one shared class")
        if self.lam is None:
            self.lam = DEFAULT_LAMBDAS[self.scenario]
        for name in ("lam", "beta2", "lr", "grad_clip"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("epochs", "pretrain_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.eta1 is None:
            self.eta1 = DEFAULT_ETAS[self.scenario][0]
        if self.eta2 is None:
            self.eta2 = DEFAULT_ETAS[self.scenario][1]
        if self.eta1 < 0 or self.eta2 < 0:
            raise ValueError("eta weights must be non-negative")
        if self.pretrain_lr is None:
            self.pretrain_lr = self.lr

    @property
    def n_outputs(self) -> int:
        return self.n_source_classes + 1

    @property
    def pseudo_private_label(self) -> int:
        return self.n_shared_classes + 1


@dataclass
class TrainState:
    model: AdaptModel
    optimizer: SgdMomentum
    config: TaskConfig
    epoch: int = 0
    last_plan: TransportPlan | None = None
    last_identification: IdentificationResult | None = None
    excluded_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


class EpochAborted(RuntimeError):
    """No feasible transport rows this epoch; the model was left unchanged."""


def _validate_sets(source: LabeledFeatureSet, target: LabeledFeatureSet, cfg):
    if source.true_labels is None:
        raise ValueError("the source set must be labeled")
    if source.true_labels.min() < 1 or source.true_labels.max() > cfg.n_source_classes:
        raise ValueError(
            f"source labels must lie in [1..{cfg.n_source_classes}]"
        )
    if source.dim != target.dim:
        raise ValueError("source and target feature dimensions differ")
    if target.true_labels is not None:
        top = (
            cfg.n_shared_classes + 1
            if cfg.scenario == "osda"
            else cfg.n_shared_classes
        )
        if target.true_labels.min() < 1 or target.true_labels.max() > top:
            raise ValueError(f"target labels must lie in [1..{top}]")


def solve_identification_round(x1_z, x1_labels, x2_z, x2_labels, cfg):
    """Shared plan-and-identify path used by both scenarios.

    Rows whose class has no partner on the candidate side are excluded
    for the epoch; the remaining rows share a uniform hard marginal so
    the total mass stays one.  Returns (plan, identification, excluded).
    """
    mask = label_mask(x1_labels, x2_labels)
    open_rows = mask.any(axis=1)
    excluded = np.flatnonzero(~open_rows)
    if not open_rows.any():
        raise EpochAborted(
            "every row was excluded: no predicted class overlaps the "
            "candidate labels"
        )
    n, m = mask.shape
    cost = squared_distances(x1_z[open_rows], x2_z)
    spec = CostSpec.semirelaxed(cost, mask[open_rows], cfg.lam, cfg.beta2)
    sub_plan = solve_masked_semirelaxed(
        Histogram.uniform(int(open_rows.sum())), Histogram.uniform(m), spec
    )
    gamma = np.zeros((n, m))
    gamma[open_rows] = sub_plan.gamma
    row_marginal = np.zeros(n)
    row_marginal[open_rows] = 1.0 / int(open_rows.sum())
    plan = TransportPlan(
        gamma,
        Histogram(row_marginal),
        sub_plan.col_marginal_target,
        sub_plan.converged,
        sub_plan.iterations,
        sub_plan.lam,
        sub_plan.beta2,
        sub_plan.cost_scale,
    )
    ident = identify(compute_scores(plan))
    return plan, ident, excluded


def _epoch_step(state: TrainState, source, target):
    cfg = state.config
    model = state.model
    zs, cache_s = forward_features(model, source.features, return_cache=True)
    zt, cache_t = forward_features(model, target.features, return_cache=True)
    target_preds = np.argmax(forward_classify(model, zt), axis=1) + 1

    if cfg.scenario == "osda":
        plan, ident, excluded = solve_identification_round(
            zs, source.true_labels, zt, target_preds, cfg
        )
        plan_st = plan
        candidate_side = "cols"
    else:
        plan, ident, excluded = solve_identification_round(
            zt, target_preds, zs, source.true_labels, cfg
        )
        plan_st = transpose_plan(plan)
        candidate_side = "rows"

    gamma_shr, gamma_prv = split_plan(plan_st, ident, candidate_side)

    if cfg.scenario == "osda" and ident.private_idx.size:
        l_cls, d_zs_cls, d_prv, h_cls = L.loss_cls(
            model, zs, source.true_labels,
            private_z=zt[ident.private_idx],
            pseudo_label=cfg.pseudo_private_label,
        )
        d_zt_cls = np.zeros_like(zt)
        d_zt_cls[ident.private_idx] = d_prv
    else:
        l_cls, d_zs_cls, _, h_cls = L.loss_cls(model, zs, source.true_labels)
        d_zt_cls = None

    l_rt, rt_align, rt_sep, d_zs_rt, d_zt_rt = L.loss_rt(
        zs, zt, gamma_shr, gamma_prv
    )
    l_br, d_zt_br, h_br, _ = L.loss_br(model, plan_st, zt, source.true_labels)

    report = L.combine(l_cls, l_rt, rt_align, rt_sep, l_br, cfg.eta1, cfg.eta2)

    buf_cls = L.assemble_gradients(model, cache_s, cache_t, d_zs_cls, d_zt_cls, h_cls)
    buf_rt = L.assemble_gradients(model, cache_s, cache_t, d_zs_rt, d_zt_rt, None)
    buf_br = L.assemble_gradients(model, cache_s, cache_t, None, d_zt_br, h_br)
    grads = buf_cls.add_scaled(buf_rt, cfg.eta1).add_scaled(buf_br, cfg.eta2)
    state.optimizer.step(model, grads)

    state.last_plan = plan
    state.last_identification = ident
    state.excluded_rows = excluded
    return report, plan, ident, excluded, target_preds


def train_epoch(state: TrainState, source, target) -> dict:
    """Run one epoch; returns the log record (model untouched on abort)."""
    state.epoch += 1
    record = {"epoch": state.epoch}
    try:
        report, plan, ident, excluded, target_preds = _epoch_step(
            state, source, target
        )
    except EpochAborted as exc:
        record.update({"aborted": True, "reason": str(exc)})
        return record
    record.update(
        {
            "l_cls": report.l_cls,
            "l_rt": report.l_rt,
            "l_rt_align": report.l_rt_align,
            "l_rt_sep": report.l_rt_sep,
            "l_br": report.l_br,
            "total": report.total,
            "excluded_rows": int(excluded.size),
            "plan_iterations": plan.iterations,
            "plan_converged": plan.converged,
            "n_flagged_private": int(ident.private_idx.size),
            "n_undecided": int(ident.undecided_idx.size),
        }
    )
    record.update(_evaluation_fields(state, source, target, ident))
    return record


def _evaluation_fields(state, source, target, ident) -> dict:
    cfg = state.config
    if target.true_labels is None:
        return {}
    model = state.model
    target_preds = np.argmax(
        forward_classify(model, forward_features(model, target.features)), axis=1
    ) + 1
    source_preds = np.argmax(
        forward_classify(model, forward_features(model, source.features)), axis=1
    ) + 1
    out = {}
    shared = range(1, cfg.n_shared_classes + 1)
    if cfg.scenario == "osda":
        report = eval_osda(target_preds, target.true_labels, cfg.n_shared_classes)
        out.update({"os_star": report.os_star, "unk": report.unk, "h": report.h})
        ratio, fp = ident_metrics(ident, target.true_labels, shared)
        src_private: tuple = ()
        tgt_private = (cfg.n_shared_classes + 1,)
    else:
        report = eval_pda(target_preds, target.true_labels)
        ratio, fp = ident_metrics(ident, source.true_labels, shared)
        src_private = tuple(
            range(cfg.n_shared_classes + 1, cfg.n_source_classes + 1)
        )
        tgt_private = ()
    out["acc"] = report.acc
    out["ident_ratio"] = ratio
    out["false_pos_rate"] = fp

    def collapse(labels):
        return collapse_labels(
            labels, shared, src_private, tgt_private,
            unknown_output=cfg.n_outputs,
        )

    bound = bound_terms(
        collapse(source_preds),
        collapse(source.true_labels),
        collapse(target_preds),
        collapse(target.true_labels),
        shared,
    )
    out.update(
        {
            "eps_s": bound.eps_s,
            "eps_t": bound.eps_t,
            "bound_value": bound.bound_value,
            "bound_holds": bound.holds,
        }
    )
    return out


def pretrain(model: AdaptModel, source: LabeledFeatureSet, cfg: TaskConfig):
    """Source-only risk minimization to warm up g and h."""
    opt = SgdMomentum(cfg.pretrain_lr, cfg.momentum, cfg.grad_clip)
    for _ in range(cfg.pretrain_epochs):
        zs, cache_s = forward_features(model, source.features, return_cache=True)
        value, d_zs, _, h_grads = L.loss_cls(model, zs, source.true_labels)
        grads = L.assemble_gradients(model, cache_s, None, d_zs, None, h_grads)
        opt.step(model, grads)
    return model


def train(
    source: LabeledFeatureSet,
    target: LabeledFeatureSet,
    cfg: TaskConfig,
    *,
    checkpoint_path=None,
    checkpoint_every: int | None = None,
    resume_from=None,
):
    """Pretrain then run the full loop; returns (model, log records)."""
    _validate_sets(source, target, cfg)
    if resume_from is not None:
        model, extra = load_checkpoint(resume_from)
        optimizer = SgdMomentum(cfg.lr, cfg.momentum, cfg.grad_clip)
        optimizer.load_state(extra["optimizer"])
        start_epoch = int(extra["epoch"])
    else:
        dims = ModelDims(source.dim, cfg.g_hidden, cfg.g_out, cfg.n_outputs)
        model = AdaptModel(dims, cfg.seed)
        pretrain(model, source, cfg)
        optimizer = SgdMomentum(cfg.lr, cfg.momentum, cfg.grad_clip)
        start_epoch = 0

    state = TrainState(model, optimizer, cfg, epoch=start_epoch)
    records = []
    for _ in range(start_epoch, cfg.epochs):
        records.append(train_epoch(state, source, target))
        if (
            checkpoint_path is not None
            and checkpoint_every
            and state.epoch % checkpoint_every == 0
        ):
            save_state(state, checkpoint_path)
    if checkpoint_path is not None:
        save_state(state, checkpoint_path)
    return model, records


def save_state(state: TrainState, path) -> None:
    save_checkpoint(
        state.model,
        path,
        extra={
            "epoch": state.epoch,
            "optimizer": state.optimizer.state(),
            "seed": state.config.seed,
        },
    )


def write_log(records, path) -> None:
    """Append-style JSON-lines training log."""
    with open(path, "w") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")
