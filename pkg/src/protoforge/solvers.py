"""Four routes to refined prototypes.

* ``solve_mean``        -- the lambda=0 closed form: X = V.
* ``solve_procrustes``  -- hard orthonormality via SVD: X = U @ R.T, the
                           nearest row-orthonormal matrix to V.
* ``solve_soft_direct`` -- adaptive-moment descent of the composite loss over
                           X itself.
* ``solve_soft_lora``   -- the same loss, but X comes from the toy encoder and
                           only the low-rank adapter factors are updated; the
                           base stays frozen and V is computed once up front.

The optimizer is Adam with decoupled weight decay.  Decay applies to adapter
parameters only: decaying X directly would silently add a ridge term to the
objective, and the fidelity anchor already plays that role.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import encoder as enc
from .corelinalg import EmbeddingMatrix, svd
from .errors import DivergedLoss, RankDeficient, ShapeMismatch
from .objective import (
    EncoderObjective,
    LossReport,
    ObjectiveConfig,
    lambda_at,
    loss,
    loss_grad_x,
)
from .prototype import PrototypeSet, TemplateSet

DIVERGENCE_LIMIT = 1e6
PAPER_LEARNING_RATE = 5e-6
PAPER_BATCH_SIZE_ECHO = 64
TRAIN_MODES = ("direct_x", "lora_encoder")


@dataclass(frozen=True)
class TrainConfig:
    """Iterative-solver hyperparameters.

    Defaults are desk-scale: lr 1e-3 suits the randomly initialized toy
    encoder (the paper's 5e-6 targets a pretrained tower and is available via
    ``paper_hparams``).  One step covers all K classes; steps_per_epoch=50 and
    epochs=20 give 1000 full-batch steps.
    """

    epochs: int = 20
    steps_per_epoch: int = 50
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    mode: str = "direct_x"

    def __post_init__(self):
        if self.epochs < 1 or self.steps_per_epoch < 1:
            raise ShapeMismatch("epochs and steps_per_epoch must be >= 1")
        if self.learning_rate <= 0:
            raise ShapeMismatch("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ShapeMismatch("betas must lie in [0, 1)")
        if self.mode not in TRAIN_MODES:
            raise ShapeMismatch(f"mode must be one of {TRAIN_MODES}")


@dataclass
class RefinementResult:
    """Refined prototypes plus the per-step loss history."""

    x: EmbeddingMatrix
    history: list[LossReport]
    method: str
    v: EmbeddingMatrix | None = None
    adapters: list[enc.LoraAdapter] | None = field(default=None, repr=False)

    def epoch_mean_totals(self, steps_per_epoch: int) -> np.ndarray:
        totals = np.array([r.total for r in self.history])
        if totals.size % steps_per_epoch:
            raise ShapeMismatch("history length is not a multiple of steps_per_epoch")
        return totals.reshape(-1, steps_per_epoch).mean(axis=1)


class AdamW:
    """Adam with bias correction and decoupled weight decay, numpy in-place."""

    def __init__(self, shapes: Sequence[tuple[int, ...]], tc: TrainConfig):
        self.tc = tc
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(
        self,
        params: Sequence[np.ndarray],
        grads: Sequence[np.ndarray],
        decay_mask: Sequence[bool],
    ) -> None:
        tc = self.tc
        self.t += 1
        bc1 = 1.0 - tc.beta1**self.t
        bc2 = 1.0 - tc.beta2**self.t
        for p, g, m, v, decay in zip(params, grads, self.m, self.v, decay_mask):
            if decay and tc.weight_decay > 0.0:
                p -= tc.learning_rate * tc.weight_decay * p
            m *= tc.beta1
            m += (1.0 - tc.beta1) * g
            v *= tc.beta2
            v += (1.0 - tc.beta2) * g * g
            p -= tc.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + tc.eps)


def _check_diverged(report: LossReport) -> None:
    if not np.isfinite(report.total) or report.total > DIVERGENCE_LIMIT:
        raise DivergedLoss(
            f"total loss {report.total:.3e} exceeded {DIVERGENCE_LIMIT:.0e}"
        )


def solve_mean(v: PrototypeSet) -> RefinementResult:
    """Closed-form lambda=0 solution: the averaged prototypes verbatim."""
    return RefinementResult(x=v.v, history=[], method="mean", v=v.v)


def solve_procrustes(v: PrototypeSet, sigma_min_tol: float = 1e-10) -> RefinementResult:
    """Project V onto the row-orthonormal manifold: X = U @ R.T from the SVD.

    Refuses rank-deficient input; there the nearest orthonormal matrix is not
    unique and a silent tie-break would hide the degeneracy.
    """
    factors = svd(v.v)
    smin = float(factors.sigma.min())
    if smin <= sigma_min_tol:
        raise RankDeficient(
            f"smallest singular value {smin:.3e} <= {sigma_min_tol:.0e}"
        )
    x = factors.u.data @ factors.r.data.T
    return RefinementResult(
        x=EmbeddingMatrix(x), history=[], method="svd", v=v.v
    )


def solve_soft_direct(
    v: PrototypeSet, obj: ObjectiveConfig, tc: TrainConfig
) -> RefinementResult:
    """Minimize the composite loss over X directly, starting from X = V."""
    vd = v.v.data
    x = np.array(vd, copy=True)
    opt = AdamW([x.shape], tc)
    history: list[LossReport] = []
    for epoch in range(tc.epochs):
        lam = lambda_at(obj, epoch)
        for _ in range(tc.steps_per_epoch):
            report = loss(x, vd, lam)
            _check_diverged(report)
            history.append(report)
            g = loss_grad_x(x, vd, lam)
            opt.step([x], [g], [False])
    return RefinementResult(
        x=EmbeddingMatrix(x), history=history, method="soft_direct", v=v.v
    )


def solve_soft_lora(
    class_names: Sequence[str],
    tset: TemplateSet | None,
    params: enc.EncoderParams,
    obj: ObjectiveConfig,
    tc: TrainConfig,
    rank: int = 8,
    adapters: Sequence[enc.LoraAdapter] | None = None,
) -> RefinementResult:
    """Fine-tune the adapters so the encoder's class embeddings minimize the loss.

    V is computed once from the initial (zero-delta) encoder through the same
    pipeline that produces X and is never recomputed afterwards, so training
    pulls X away from V only through the penalty term.
    """
    if adapters is None:
        adapters = enc.default_adapters(params, rank, tc.seed)
    else:
        adapters = list(adapters)

    # anchor: the encoder's own initial embeddings
    probe = EncoderObjective(
        params, class_names, tset,
        v=np.zeros((len(class_names), params.out_dim)), config=obj,
    )
    v0 = probe.current_x(adapters)
    objective = EncoderObjective(params, class_names, tset, v=v0, config=obj)

    param_order: list[tuple[enc.LoraAdapter, str]] = []
    tensors: list[np.ndarray] = []
    for ad in adapters:
        param_order.append((ad, "a"))
        tensors.append(ad.a)
        param_order.append((ad, "b"))
        tensors.append(ad.b)
    opt = AdamW([t.shape for t in tensors], tc)

    history: list[LossReport] = []
    for epoch in range(tc.epochs):
        lam = lambda_at(obj, epoch)
        for _ in range(tc.steps_per_epoch):
            report, _, grads = objective.value_and_grads(adapters, lam)
            _check_diverged(report)
            history.append(report)
            grad_list = []
            for ad, which in param_order:
                da, db = grads[ad.target]
                grad_list.append(da if which == "a" else db)
            opt.step(tensors, grad_list, [True] * len(tensors))

    x_final = objective.current_x(adapters)
    return RefinementResult(
        x=EmbeddingMatrix(x_final),
        history=history,
        method="soft_lora",
        v=EmbeddingMatrix(v0),
        adapters=list(adapters),
    )
