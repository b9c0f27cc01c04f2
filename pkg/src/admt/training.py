"""The training algorithm: alternate dual-teacher scheduling, entropy-based
pseudo-label fusion with conflict handling, the dice+CE loss pair, and the
consistency-weight ramp.

Distributions are [M,C,H,W] float64 arrays whose channel vectors sum to 1
per pixel. Entropies are in bits (log2) while ensemble weights use the
natural exponent on those bit values; both choices are deliberate and
load-bearing for the fusion rule. Channel reductions accumulate
left-to-right so results are reproducible bit-for-bit.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import augment
from .autodiff import (
    Tape,
    Tensor,
    add,
    add_const,
    backward,
    div,
    log,
    mul_const,
    scale,
    softmax_channels,
    sum_all,
    sum_axes,
)
from .model import ema_update, poly_lr, sgd_step

DICE_EPS = 1e-5

SOURCE_ENSEMBLE = 0
SOURCE_STUDENT = 1

ENSEMBLING_STRATEGIES = ("drop", "avg", "entropy", "ccm")

REPORT_COLUMNS = (
    "iter",
    "lr",
    "lambda_t",
    "loss_x",
    "loss_u",
    "active_teacher",
    "conflict_frac",
    "retained_frac",
)


class TrainingError(RuntimeError):
    """Non-finite loss or gradients; carries the last step's diagnostics."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


# ---------------------------------------------------------------------------
# entropy and fusion


def entropy_bits(dist, axis=1):
    """Per-pixel Shannon entropy in bits, with 0*log0 := 0."""
    d = np.asarray(dist, dtype=np.float64)
    if np.any(d < 0):
        raise ValueError("negative probability in distribution")
    num_classes = d.shape[axis]
    acc = np.zeros(d.shape[:axis] + d.shape[axis + 1 :])
    for c in range(num_classes):
        p = np.take(d, c, axis=axis)
        lg = np.log2(p, out=np.zeros_like(p), where=p > 0)
        acc = acc + p * lg
    return -acc


def entropy_ensemble(q1, q2):
    """Entropy-weighted convex combination of two teacher distributions.

    Weights are normalized before mixing so that equal inputs pass
    through exactly (w/(w+w) is exactly 0.5 in binary floating point).
    """
    h1 = entropy_bits(q1)
    h2 = entropy_bits(q2)
    w1 = np.exp(-h1)[:, None]
    w2 = np.exp(-h2)[:, None]
    s = w1 + w2
    return (w1 / s) * q1 + (w2 / s) * q2


@dataclasses.dataclass
class PseudoLabelBatch:
    """Fused per-pixel targets plus the confidence-threshold validity mask."""

    hard: np.ndarray  # [M,H,W] int64 class indices
    valid: np.ndarray  # [M,H,W] bool; invalid pixels contribute zero loss
    source: np.ndarray  # [M,H,W] uint8, SOURCE_ENSEMBLE or SOURCE_STUDENT
    conflict_frac: float
    retained_frac: float


def _finish(candidate, tau, conflict, source):
    hard = np.argmax(candidate, axis=1)
    valid = candidate.max(axis=1) >= tau
    return PseudoLabelBatch(
        hard=hard,
        valid=valid,
        source=source,
        conflict_frac=float(conflict.mean()) if conflict is not None else 0.0,
        retained_frac=float(valid.mean()),
    )


def ccm_fuse(q_t1, q_t2, q_s, tau):
    """Conflict-combating fusion of two teachers with student fallback.

    Where the teachers' argmax classes agree, the entropy-weighted
    ensemble supervises. Where they conflict, the student's own
    prediction takes over if it is lower-entropy than the ensemble.
    Either way only pixels whose chosen distribution peaks at >= tau
    are retained.
    """
    psi = entropy_ensemble(q_t1, q_t2)
    conflict = np.argmax(q_t1, axis=1) != np.argmax(q_t2, axis=1)
    use_student = conflict & (entropy_bits(psi) > entropy_bits(q_s))
    candidate = np.where(use_student[:, None], q_s, psi)
    source = np.where(use_student, SOURCE_STUDENT, SOURCE_ENSEMBLE).astype(np.uint8)
    return _finish(candidate, tau, conflict, source)


def fuse_pseudo_labels(strategy, q_t1, q_t2, q_s, tau):
    """Ablation dispatch over conflict-handling strategies."""
    if strategy == "ccm":
        return ccm_fuse(q_t1, q_t2, q_s, tau)
    conflict = np.argmax(q_t1, axis=1) != np.argmax(q_t2, axis=1)
    source = np.zeros(conflict.shape, dtype=np.uint8)
    if strategy == "avg":
        candidate = 0.5 * (q_t1 + q_t2)
    elif strategy in ("entropy", "drop"):
        candidate = entropy_ensemble(q_t1, q_t2)
    else:
        raise ValueError(f"unknown ensembling strategy {strategy!r}")
    plb = _finish(candidate, tau, conflict, source)
    if strategy == "drop":
        plb.valid &= ~conflict
        plb.retained_frac = float(plb.valid.mean())
    return plb


def fuse_single(q_t, tau):
    """Plain single-teacher pseudo-labels behind the same tau mask."""
    source = np.zeros(q_t.shape[0:1] + q_t.shape[2:], dtype=np.uint8)
    return _finish(q_t, tau, None, source)


# ---------------------------------------------------------------------------
# losses


def dice_ce_loss(probs, targets, valid=None):
    """0.5 * (soft dice + cross-entropy) over valid pixels.

    probs is a softmax-output Tensor [N,C,H,W]; targets are int class
    indices [N,H,W]. Per-class soft dice uses batch-global sums and is
    averaged over the classes present among the valid target pixels;
    cross-entropy is averaged over valid pixels. Returns exact 0 when
    nothing is valid.
    """
    n, num_classes, h, w = probs.data.shape
    targets = np.asarray(targets)
    if valid is None:
        valid = np.ones(targets.shape, dtype=bool)
    n_valid = int(valid.sum())
    if n_valid == 0:
        return Tensor(0.0)

    onehot = np.zeros((n, num_classes, h, w))
    idx_n, idx_h, idx_w = np.nonzero(valid)
    onehot[idx_n, targets[idx_n, idx_h, idx_w], idx_h, idx_w] = 1.0

    # gather p[target] per pixel; invalid pixels are padded to 1 so their
    # log is exactly 0 (log of a true 0 would poison the sum with -inf)
    p_target = sum_axes(mul_const(probs, onehot), (1,))
    p_safe = add_const(p_target, 1.0 - valid.astype(np.float64))
    ce = scale(sum_all(log(p_safe)), -1.0 / n_valid)

    valid_full = np.broadcast_to(valid[:, None], probs.data.shape).astype(np.float64)
    inter = sum_axes(mul_const(probs, onehot), (0, 2, 3))  # [C]
    psum = sum_axes(mul_const(probs, valid_full), (0, 2, 3))
    tsum = onehot.sum(axis=(0, 2, 3))
    present = (tsum > 0).astype(np.float64)
    n_present = float(present.sum())
    frac = div(add_const(scale(inter, 2.0), DICE_EPS), add_const(psum, tsum + DICE_EPS))
    dice = add_const(scale(sum_all(mul_const(frac, present)), -1.0 / n_present), 1.0)

    return scale(add(dice, ce), 0.5)


def lambda_weight(iteration, lambda_u_max, ramp_iters):
    """Sigmoid-shaped ramp to lambda_u_max, constant after ramp_iters."""
    if ramp_iters <= 0:
        return lambda_u_max
    t = min(iteration, ramp_iters) / ramp_iters
    return lambda_u_max * float(np.exp(-5.0 * (1.0 - t) ** 2))


# ---------------------------------------------------------------------------
# teacher scheduling


@dataclasses.dataclass
class RpaState:
    """Which teacher is being EMA-updated and for how much longer.

    Periods are drawn uniformly from {1..t_max_iters} whenever a switch
    happens (0-length turns would skip a teacher entirely).
    """

    active: int  # 1 or 2
    iters_remaining: int
    t_max_iters: int
    rng: np.random.Generator

    @classmethod
    def fresh(cls, t_max_iters, rng):
        t = max(1, int(t_max_iters))
        return cls(
            active=1,
            iters_remaining=int(rng.integers(1, t + 1)),
            t_max_iters=t,
            rng=rng,
        )

    def tick(self):
        """(teacher updated this iteration, its strong-augmentation kind)."""
        teacher = self.active
        kind = "color" if teacher == 1 else "copypaste"
        self.iters_remaining -= 1
        if self.iters_remaining == 0:
            self.active = 2 if self.active == 1 else 1
            self.iters_remaining = int(self.rng.integers(1, self.t_max_iters + 1))
        return teacher, kind


# ---------------------------------------------------------------------------
# the training step


@dataclasses.dataclass
class StepReport:
    iteration: int
    lr: float
    lambda_t: float
    loss_x: float
    loss_u: float
    active_teacher: int  # 0 when no teacher is in play
    conflict_frac: float
    retained_frac: float
    unlabeled_ids: tuple = ()  # instrumentation only, not serialized

    def csv_row(self):
        return ",".join(
            [
                str(self.iteration),
                f"{self.lr:.12g}",
                f"{self.lambda_t:.12g}",
                f"{self.loss_x:.12g}",
                f"{self.loss_u:.12g}",
                str(self.active_teacher),
                f"{self.conflict_frac:.12g}",
                f"{self.retained_frac:.12g}",
            ]
        )


MODES = ("sup_only", "mt_single_t1", "mt_single_t2", "admt_rpa_only", "admt_full")


class Trainer:
    """Owns the student/teacher parameter vectors and runs one step at a time.

    Only the student receives gradients; teachers change exclusively via
    ema_update on whichever one the schedule activates.
    """

    def __init__(
        self,
        model,
        seed,
        mode="admt_full",
        ensembling="ccm",
        crop_size=48,
        max_iters=1000,
        base_lr=0.01,
        momentum=0.9,
        weight_decay=1e-4,
        ema_decay=0.99,
        lambda_u_max=2.0,
        ramp_iters=100,
        tau=0.95,
        t_max_iters=1,
    ):
        from .rng import substream

        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        self.model = model
        self.mode = mode
        self.ensembling = ensembling
        self.crop_size = crop_size
        self.max_iters = max_iters
        self.base_lr = base_lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.ema_decay = ema_decay
        self.lambda_u_max = lambda_u_max
        self.ramp_iters = ramp_iters
        self.tau = tau

        self.student = model.init_params(substream(seed, "init_student"))
        self.velocity = np.zeros_like(self.student)
        self.teacher1 = self.teacher2 = None
        if mode in ("mt_single_t1", "admt_rpa_only", "admt_full"):
            self.teacher1 = model.init_params(substream(seed, "init_t1"))
        if mode in ("mt_single_t2", "admt_rpa_only", "admt_full"):
            self.teacher2 = model.init_params(substream(seed, "init_t2"))
        self.rpa = None
        if mode in ("admt_rpa_only", "admt_full"):
            self.rpa = RpaState.fresh(t_max_iters, substream(seed, "rpa"))
        self._aug_labeled = substream(seed, "aug_labeled")
        self._aug_unlabeled = substream(seed, "aug_unlabeled")

    # -- helpers ---------------------------------------------------------

    def _weak_labeled(self, batch):
        images, masks = [], []
        for s in batch:
            img, msk, _ = augment.weak(s.image, s.mask, self._aug_labeled, self.crop_size)
            images.append(img)
            masks.append(msk)
        return np.stack(images)[:, None], np.stack(masks)

    def _weak_unlabeled(self, batch):
        images = []
        for s in batch:
            img, _, _ = augment.weak(s.image, None, self._aug_unlabeled, self.crop_size)
            images.append(img)
        return np.stack(images)[:, None]

    def _infer_probs(self, params, images):
        # outside any tape, so nothing is recorded
        return softmax_channels(self.model.forward(params, images)).data

    def _pseudo_labels(self, weak_images):
        q_s = self._infer_probs(self.student, weak_images)
        if self.mode == "mt_single_t1":
            return fuse_single(self._infer_probs(self.teacher1, weak_images), self.tau)
        if self.mode == "mt_single_t2":
            return fuse_single(self._infer_probs(self.teacher2, weak_images), self.tau)
        q_t1 = self._infer_probs(self.teacher1, weak_images)
        q_t2 = self._infer_probs(self.teacher2, weak_images)
        return fuse_pseudo_labels(self.ensembling, q_t1, q_t2, q_s, self.tau)

    def _strong_views(self, weak_images, plb, kind):
        m = weak_images.shape[0]
        if kind == "color":
            strong = np.stack(
                [augment.strong_color(weak_images[i, 0], self._aug_unlabeled)[0] for i in range(m)]
            )[:, None]
            return strong, plb.hard, plb.valid
        strong = np.empty_like(weak_images)
        hard = np.empty_like(plb.hard)
        valid = np.empty_like(plb.valid)
        for i in range(m):
            j = (i + 1) % m  # circularly-shifted in-batch pairing
            mixed, (h_i, v_i, _s_i), _ = augment.strong_copypaste(
                weak_images[i, 0],
                weak_images[j, 0],
                (plb.hard[i], plb.valid[i], plb.source[i]),
                (plb.hard[j], plb.valid[j], plb.source[j]),
                self._aug_unlabeled,
            )
            strong[i, 0] = mixed
            hard[i] = h_i
            valid[i] = v_i
        return strong, hard, valid

    # -- the step --------------------------------------------------------

    def step(self, labeled_batch, unlabeled_batch, iteration):
        x_l, y_l = self._weak_labeled(labeled_batch)
        semi = self.mode != "sup_only"

        lam = 0.0
        active = 0
        plb = None
        if semi:
            u_weak = self._weak_unlabeled(unlabeled_batch)
            plb = self._pseudo_labels(u_weak)
            if self.rpa is not None:
                active, kind = self.rpa.tick()
            else:
                active = 1 if self.mode == "mt_single_t1" else 2
                kind = "color" if active == 1 else "copypaste"
            u_strong, u_hard, u_valid = self._strong_views(u_weak, plb, kind)
            lam = lambda_weight(iteration, self.lambda_u_max, self.ramp_iters)

        with Tape() as tape:
            tensors = self.model.bind(self.student, requires_grad=True)
            loss_x = dice_ce_loss(
                softmax_channels(self.model.forward_bound(tensors, x_l)), y_l
            )
            if semi:
                loss_u = dice_ce_loss(
                    softmax_channels(self.model.forward_bound(tensors, u_strong)),
                    u_hard,
                    u_valid,
                )
                # consistency normalizes over all pixels, not just retained
                # ones: sparse early retention must not carry full-batch
                # gradient weight, so the masked loss is scaled back by the
                # retained fraction
                retained = float(u_valid.mean())
                total = add(loss_x, scale(loss_u, lam * retained))
            else:
                loss_u = Tensor(0.0)
                total = loss_x

        report = StepReport(
            iteration=iteration,
            lr=poly_lr(iteration, self.max_iters, self.base_lr),
            lambda_t=lam,
            loss_x=loss_x.item(),
            loss_u=loss_u.item(),
            active_teacher=active,
            conflict_frac=plb.conflict_frac if plb else 0.0,
            retained_frac=plb.retained_frac if plb else 0.0,
            unlabeled_ids=tuple(s.id for s in unlabeled_batch) if semi else (),
        )
        if not np.isfinite(total.item()):
            raise TrainingError(
                f"non-finite loss at iteration {iteration}", report=report
            )

        backward(tape, total)
        grads = self.model.grad_vector(tensors)
        sgd_step(
            self.student, grads, self.velocity, report.lr, self.momentum, self.weight_decay
        )

        if semi:
            if active == 1:
                self.teacher1 = ema_update(self.teacher1, self.student, self.ema_decay)
            else:
                self.teacher2 = ema_update(self.teacher2, self.student, self.ema_decay)
        return report
