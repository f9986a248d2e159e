"""The composite refinement loss and its gradients.

``loss(X, V, lam) = ||X - V||_F^2 + lam * ||X X^T - I||_F^2``

The first term anchors refined prototypes to the averaged ones, the second
softly drives the Gram matrix toward identity (unit rows, zero pairwise
cosines).  Gradients are analytic: directly w.r.t. X, and chained through the
toy encoder down to the LoRA adapter factors, with an optional unit-sphere
projection Jacobian in between.  A central-difference gradient checker keeps
everything honest.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import encoder as enc
from .corelinalg import EmbeddingMatrix
from .errors import NonFinite, ShapeMismatch
from .prototype import TemplateSet, expand_templates

X_MODES = ("averaged", "bare")


@dataclass(frozen=True)
class ObjectiveConfig:
    """Penalty schedule and encoder-output handling.

    lambda0 starts at 2.0 and grows 1.15x per epoch by default.  normalize_x
    projects encoder outputs onto the unit sphere before the loss; off by
    default since the penalty's diagonal already controls row norms and
    projecting first would make that term inert.
    """

    lambda0: float = 2.0
    lambda_growth: float = 1.15
    normalize_x: bool = False
    x_mode: str = "averaged"

    def __post_init__(self):
        if self.lambda0 < 0:
            raise ShapeMismatch("lambda0 must be >= 0")
        if self.lambda_growth < 1.0:
            raise ShapeMismatch("lambda_growth must be >= 1")
        if self.x_mode not in X_MODES:
            raise ShapeMismatch(f"x_mode must be one of {X_MODES}")


@dataclass(frozen=True)
class LossReport:
    """One loss evaluation split into its two terms."""

    fidelity: float
    penalty: float
    lam: float
    total: float

    def __post_init__(self):
        if self.fidelity < 0 or self.penalty < 0:
            raise ShapeMismatch("loss components must be nonnegative")
        expected = self.fidelity + self.lam * self.penalty
        scale = max(abs(expected), 1e-300)
        if abs(self.total - expected) > 1e-12 * scale:
            raise ShapeMismatch("total != fidelity + lam * penalty")

    def as_dict(self) -> dict:
        return {
            "fidelity": self.fidelity,
            "penalty": self.penalty,
            "lambda": self.lam,
            "total": self.total,
        }


def _data(m) -> np.ndarray:
    return m.data if isinstance(m, EmbeddingMatrix) else np.asarray(m, dtype=np.float64)


def loss(x, v, lam: float) -> LossReport:
    """Evaluate the composite loss at X against anchor V."""
    xd, vd = _data(x), _data(v)
    if xd.shape != vd.shape:
        raise ShapeMismatch(f"x {xd.shape} vs v {vd.shape}")
    diff = xd - vd
    fidelity = float(np.sum(diff * diff))
    e = xd @ xd.T - np.eye(xd.shape[0])
    penalty = float(np.sum(e * e))
    return LossReport(fidelity=fidelity, penalty=penalty, lam=lam,
                      total=fidelity + lam * penalty)


def loss_grad_x(x, v, lam: float) -> np.ndarray:
    """Analytic gradient 2(X - V) + 4 lam (X X^T - I) X."""
    xd, vd = _data(x), _data(v)
    if xd.shape != vd.shape:
        raise ShapeMismatch(f"x {xd.shape} vs v {vd.shape}")
    e = xd @ xd.T - np.eye(xd.shape[0])
    return 2.0 * (xd - vd) + 4.0 * lam * (e @ xd)


def lambda_at(config: ObjectiveConfig, epoch: int) -> float:
    """Penalty weight in force during the given epoch."""
    if epoch < 0:
        raise ShapeMismatch("epoch must be >= 0")
    return config.lambda0 * config.lambda_growth**epoch


def grad_check(
    f: Callable[[np.ndarray], float],
    analytic: np.ndarray,
    point: np.ndarray,
    step: float = 1e-5,
) -> float:
    """Max relative error between central differences of f and the analytic gradient.

    The relative error denominator is max(|analytic_i|, |numeric_i|, 1e-10)
    per coordinate.  Raises NonFinite if f produces NaN/Inf near the point.
    """
    if step <= 0:
        raise ShapeMismatch("step must be positive")
    point = np.asarray(point, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != point.shape:
        raise ShapeMismatch("analytic gradient and point shapes differ")
    worst = 0.0
    p = point.copy()
    for i in range(p.size):
        orig = p.flat[i]
        p.flat[i] = orig + step
        f_plus = f(p)
        p.flat[i] = orig - step
        f_minus = f(p)
        p.flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NonFinite(f"f is not finite near coordinate {i}")
        numeric = (f_plus - f_minus) / (2.0 * step)
        a = analytic.flat[i]
        if abs(a) < 1e-10 and abs(numeric) < 1e-10:
            continue
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-10)
        worst = max(worst, err)
    return worst


# -- loss chained through the encoder to the adapters ---------------------------


class EncoderObjective:
    """Binds the loss to encoder outputs so adapter gradients can be taken.

    Rows of X come from encoding either the bare class names or, in averaged
    mode, the mean over the template expansion of each class.  V is supplied
    by the caller and stays fixed.
    """

    def __init__(
        self,
        params: enc.EncoderParams,
        class_names: Sequence[str],
        tset: TemplateSet | None,
        v: np.ndarray,
        config: ObjectiveConfig,
    ):
        self.params = params
        self.config = config
        self.k = len(class_names)
        if config.x_mode == "averaged":
            if tset is None:
                raise ShapeMismatch("averaged x_mode requires a TemplateSet")
            prompts = expand_templates(class_names, tset)
            self.t = len(tset)
        else:
            prompts = list(class_names)
            self.t = 1
        self.seqs = [enc.tokenize(p, params.vocab_size) for p in prompts]
        self.v = np.asarray(v, dtype=np.float64)
        if self.v.shape != (self.k, params.out_dim):
            raise ShapeMismatch(
                f"v has shape {self.v.shape}, expected {(self.k, params.out_dim)}"
            )

    def current_x(self, adapters: Sequence[enc.LoraAdapter]) -> np.ndarray:
        x, _, _ = self._forward(adapters)
        return x

    def _forward(self, adapters):
        out, cache = enc.encode_batch(self.params, adapters, self.seqs)
        u = out.reshape(self.k, self.t, -1).mean(axis=1)
        if self.config.normalize_x:
            norms = np.linalg.norm(u, axis=1, keepdims=True)
            x = u / norms
        else:
            norms = None
            x = u
        return x, u, (cache, norms)

    def value_and_grads(
        self, adapters: Sequence[enc.LoraAdapter], lam: float
    ) -> tuple[LossReport, np.ndarray, dict[str, tuple[np.ndarray, np.ndarray]]]:
        """Loss report, current X and adapter gradients at the given lambda."""
        x, u, (cache, norms) = self._forward(adapters)
        report = loss(x, self.v, lam)
        g_x = loss_grad_x(x, self.v, lam)
        if self.config.normalize_x:
            # sphere projection: x = u/|u|, dL/du = (g - (g.x) x) / |u|
            proj = g_x - np.sum(g_x * x, axis=1, keepdims=True) * x
            g_u = proj / norms
        else:
            g_u = g_x
        # averaging over templates spreads the row gradient evenly
        g_out = np.repeat(g_u / self.t, self.t, axis=0)
        grads = enc.adapter_backward(self.params, adapters, cache, g_out)
        return report, x, grads
