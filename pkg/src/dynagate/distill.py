"""Teacher-student training: feature matching, then label + soft-label
cross-entropy, with the gate sparsity penalty active in both stages.

The teacher is never updated. The student starts from the teacher's
weights with fresh gate predictors; stage 1 matches the four encoder
stage outputs (decoder frozen), stage 2 trains everything against
labels plus the teacher's logits. Runs are deterministic given the
seed-addressed dataset, and every step appends one CSV row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import IGNORE_INDEX
from .errors import ContractError, DimensionError, DivergenceError, EmptyInputError
from .gating import GateContext, SparsitySchedule, sparsity_loss
from .optim import Adam, PolyLR
from .static_pruning import build_static_masks
from .tensor import Tensor

KD_CHOICES = ("none", "stage1", "stage2", "both")
MODE_CHOICES = ("dynamic", "static", "dense")


@dataclass
class DistillConfig:
    stage1_steps: int
    stage2_steps: int
    batch_size: int = 8
    lr: float = 2e-3
    poly_power: float = 0.9
    lambda_s: float = 0.5
    lambda_m: float = 0.005
    target_sparsity: float = 0.5
    anneal: bool = True
    kd: str = "both"
    mode: str = "dynamic"

    def __post_init__(self):
        if self.stage1_steps < 0 or self.stage2_steps < 0:
            raise ContractError("step counts must be non-negative")
        if self.kd not in KD_CHOICES:
            raise ContractError(f"kd must be one of {KD_CHOICES}, got {self.kd!r}")
        if self.mode not in MODE_CHOICES:
            raise ContractError(
                f"mode must be one of {MODE_CHOICES}, got {self.mode!r}")

    @property
    def total_steps(self) -> int:
        return self.stage1_steps + self.stage2_steps

    @property
    def kd_stage1(self) -> bool:
        return self.kd in ("stage1", "both")

    @property
    def kd_stage2(self) -> bool:
        return self.kd in ("stage2", "both")

    def schedule(self) -> SparsitySchedule:
        anneal_steps = self.total_steps // 2 if self.anneal else 0
        return SparsitySchedule(self.target_sparsity, anneal_steps)


@dataclass
class LossReport:
    step: int
    stage: str
    ce: float
    sce: float
    mse: float
    l_m: float
    total: float
    keep_fraction: float

    CSV_HEADER = "step,stage,ce,sce,mse,l_m,total,keep_fraction"

    def csv_row(self) -> str:
        return (f"{self.step},{self.stage},{self.ce!r},{self.sce!r},"
                f"{self.mse!r},{self.l_m!r},{self.total!r},{self.keep_fraction!r}")


def _tokens(feat):
    return feat.tokens if hasattr(feat, "tokens") else feat


def stage1_loss(student_feats, teacher_feats) -> Tensor:
    """Sum over stages of the mean squared error between student and
    teacher stage outputs."""
    if len(student_feats) != len(teacher_feats):
        raise DimensionError(
            f"feature list lengths differ: {len(student_feats)} vs "
            f"{len(teacher_feats)}")
    total = None
    for sf, tf in zip(student_feats, teacher_feats):
        s, t = _tokens(sf), _tokens(tf)
        if s.data.shape != t.data.shape:
            raise DimensionError(
                f"feature shapes differ: {s.data.shape} vs {t.data.shape}")
        diff = s - Tensor(t.data)
        term = T.mean_all(T.mul(diff, diff))
        total = term if total is None else total + term
    if total is None:
        raise EmptyInputError("no features to match")
    return total


def _flat_log_probs(logits: Tensor, labels: np.ndarray):
    b, k, h, w = logits.data.shape
    if labels.shape != (b, h, w):
        raise DimensionError(
            f"labels shape {labels.shape} does not match logits grid "
            f"{(b, h, w)}")
    flat = T.reshape(logits.transpose(0, 2, 3, 1), (b * h * w, k))
    return T.log_softmax_rows(flat), labels.reshape(-1), k


def ce_loss(logits: Tensor, labels: np.ndarray,
            ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Cross-entropy against integer labels, averaged over non-void
    pixels."""
    logp, lab, k = _flat_log_probs(logits, np.asarray(labels))
    valid = lab != ignore_index
    n = int(valid.sum())
    if n == 0:
        raise EmptyInputError("all pixels carry the void label")
    weights = np.zeros(logp.data.shape)
    weights[np.flatnonzero(valid), lab[valid]] = 1.0 / n
    return T.sum_all(T.mul(logp, Tensor(weights))) * -1.0


def soft_ce_loss(logits: Tensor, teacher_logits: np.ndarray,
                 labels: np.ndarray,
                 ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Cross-entropy against the teacher's softmax, averaged over
    non-void pixels."""
    logp, lab, k = _flat_log_probs(logits, np.asarray(labels))
    tl = np.asarray(teacher_logits)
    if tl.shape != logits.data.shape:
        raise DimensionError(
            f"teacher logits shape {tl.shape} != student {logits.data.shape}")
    valid = lab != ignore_index
    n = int(valid.sum())
    if n == 0:
        raise EmptyInputError("all pixels carry the void label")
    flat_t = np.transpose(tl, (0, 2, 3, 1)).reshape(-1, k)
    flat_t = flat_t - flat_t.max(axis=-1, keepdims=True)
    q = np.exp(flat_t)
    q /= q.sum(axis=-1, keepdims=True)
    q[~valid] = 0.0
    return T.sum_all(T.mul(logp, Tensor(q / n))) * -1.0


def stage2_loss(student_logits: Tensor, teacher_logits, labels,
                lambda_s: float, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """CE against labels plus lambda_s times soft CE against the
    teacher."""
    loss = ce_loss(student_logits, labels, ignore_index)
    if lambda_s != 0.0:
        loss = loss + soft_ce_loss(student_logits, teacher_logits, labels,
                                   ignore_index) * lambda_s
    return loss


def _check_finite(value: float, step: int, stage: str):
    if not np.isfinite(value):
        raise DivergenceError(
            f"non-finite loss {value} at step {step} ({stage}); "
            "lower the learning rate or check the data")


def _upsampled_logits(model, images, ctx, hw):
    logits = model.forward(images, ctx)
    if tuple(logits.data.shape[-2:]) != tuple(hw):
        logits = T.bilinear_upsample(logits, hw)
    return logits


class _GatePolicy:
    """Produces the per-step GateContext for the configured mode and
    refreshes static masks whenever the keep fraction moves."""

    def __init__(self, model, cfg: DistillConfig):
        self.model = model
        self.cfg = cfg
        self.schedule = cfg.schedule()
        self._static_keep = None
        self._static_masks = None

    def context(self, step: int):
        keep = self.schedule.keep_fraction(step)
        if self.cfg.mode == "dense":
            return None, keep
        if self.cfg.mode == "static":
            if keep != self._static_keep:
                self._static_masks = build_static_masks(self.model, keep)
                self._static_keep = keep
            return GateContext("static", keep, static_masks=self._static_masks,
                               record=True), keep
        return GateContext("dynamic", keep, record=True), keep


def train_two_stage(teacher, student, dataset, cfg: DistillConfig,
                    log_path=None, checkpoint_dir=None):
    """Run both distillation stages; returns the LossReport list.

    Stage 1 trains the student encoder to match the teacher's stage
    outputs (decoder untouched); without stage-1 distillation the same
    steps train on labels instead so every ablation cell sees the same
    step count. Stage 2 trains the full model on labels, optionally
    with the teacher's soft targets. Gate sparsity pressure applies in
    both stages; a non-finite loss aborts.
    """
    policy = _GatePolicy(student, cfg)
    label_hw = dataset.hw
    reports = []
    log = open(log_path, "w") if log_path is not None else None
    try:
        if log is not None:
            log.write(LossReport.CSV_HEADER + "\n")

        def run_phase(stage, steps, step_offset, params, loss_fn):
            if steps == 0:
                return
            opt = Adam(params, lr=cfg.lr)
            lr_sched = PolyLR(opt, steps, power=cfg.poly_power)
            for i in range(steps):
                step = step_offset + i
                lr_sched.set_step(i)
                images, labels = dataset.step_batch(step, cfg.batch_size)
                ctx, keep = policy.context(step)
                report = loss_fn(step, stage, images, labels, ctx, keep, opt)
                reports.append(report)
                if log is not None:
                    log.write(report.csv_row() + "\n")

        def finish_step(opt, loss, parts, step, stage, keep):
            total = float(loss.data)
            _check_finite(total, step, stage)
            opt.zero_grad()
            loss.backward()
            opt.step()
            ce, sce, mse, l_m = parts
            return LossReport(step, stage, ce, sce, mse, l_m, total, keep)

        def stage1_kd(step, stage, images, labels, ctx, keep, opt):
            with T.no_grad():
                teacher_feats = teacher.encode(images)
            student_feats = student.encode(images, ctx)
            mse = stage1_loss(student_feats, teacher_feats)
            l_m = sparsity_loss([gm for _, _, gm in ctx.records], cfg.lambda_m) \
                if ctx is not None else Tensor(np.asarray(0.0))
            loss = mse + l_m
            return finish_step(opt, loss, (0.0, 0.0, float(mse.data),
                                           float(l_m.data)), step, stage, keep)

        def label_phase(kd: bool):
            def run(step, stage, images, labels, ctx, keep, opt):
                logits = _upsampled_logits(student, images, ctx, label_hw)
                ce = ce_loss(logits, labels)
                sce = Tensor(np.asarray(0.0))
                if kd:
                    with T.no_grad():
                        t_logits = _upsampled_logits(teacher, images, None,
                                                     label_hw)
                    sce = soft_ce_loss(logits, t_logits.data, labels)
                l_m = sparsity_loss([gm for _, _, gm in ctx.records],
                                    cfg.lambda_m) \
                    if ctx is not None else Tensor(np.asarray(0.0))
                loss = ce + sce * cfg.lambda_s + l_m
                return finish_step(opt, loss, (float(ce.data), float(sce.data),
                                               0.0, float(l_m.data)),
                                   step, stage, keep)
            return run

        encoder_params = [p for _, p in student.encoder.named_parameters()]
        all_params = student.parameters()
        if cfg.kd_stage1:
            run_phase("stage1", cfg.stage1_steps, 0, encoder_params, stage1_kd)
        else:
            run_phase("stage1", cfg.stage1_steps, 0, all_params,
                      label_phase(kd=False))
        if checkpoint_dir is not None:
            student.save(f"{checkpoint_dir}/stage1.ckpt")
        run_phase("stage2", cfg.stage2_steps, cfg.stage1_steps, all_params,
                  label_phase(kd=cfg.kd_stage2))
        if checkpoint_dir is not None:
            student.save(f"{checkpoint_dir}/student.ckpt")
    finally:
        if log is not None:
            log.close()
    return reports


def train_teacher(model, dataset, steps: int, batch_size: int = 8,
                  lr: float = 2e-3, poly_power: float = 0.9, log_path=None):
    """Plain cross-entropy training of the dense model; one CSV row per
    step in the LossReport schema."""
    reports = []
    log = open(log_path, "w") if log_path is not None else None
    try:
        if log is not None:
            log.write(LossReport.CSV_HEADER + "\n")
        if steps > 0:
            opt = Adam(model.parameters(), lr=lr)
            lr_sched = PolyLR(opt, steps, power=poly_power)
            for step in range(steps):
                lr_sched.set_step(step)
                images, labels = dataset.step_batch(step, batch_size)
                logits = _upsampled_logits(model, images, None, dataset.hw)
                loss = ce_loss(logits, labels)
                total = float(loss.data)
                _check_finite(total, step, "teacher")
                opt.zero_grad()
                loss.backward()
                opt.step()
                report = LossReport(step, "teacher", total, 0.0, 0.0, 0.0,
                                    total, 1.0)
                reports.append(report)
                if log is not None:
                    log.write(report.csv_row() + "\n")
    finally:
        if log is not None:
            log.close()
    return reports
