"""Task losses, the composite objective, and the regularizer warm-up.

Logits follow the same column-major convention as the feature block:
class by batch (c x m). Setting A is plain cross-entropy on labels;
setting B distills from a full-precision teacher with a KL term and needs
no labels at all.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import mec as mec_mod
from .errors import ConfigError, ValidationError

REPORT_FIELDS = ("step", "epoch", "task", "mec_raw", "lambda", "total")


@dataclass(frozen=True)
class LambdaSchedule:
    """Warm-up for the regularizer weight: exp ramp from str*e^-5 to str."""

    strength: float
    warmup_epochs: int

    def __post_init__(self):
        if not (self.strength > 0):
            raise ConfigError(f"schedule strength must be positive, got {self.strength}")
        if int(self.warmup_epochs) != self.warmup_epochs or self.warmup_epochs <= 0:
            raise ConfigError(f"warmup epochs must be a positive integer, got {self.warmup_epochs}")


def lambda_at(sched: LambdaSchedule, t) -> float:
    """Weight at epoch t: str * exp(-5 * (1 - (beta/E)^2)), beta = clip(t, 0, E)."""
    if sched.warmup_epochs <= 0:
        raise ConfigError("warmup epochs must be positive")
    if t < 0:
        raise ValidationError(f"epoch must be >= 0, got {t}")
    e = float(sched.warmup_epochs)
    beta = min(max(float(t), 0.0), e)
    return sched.strength * math.exp(-5.0 * (1.0 - (beta / e) ** 2))


@dataclass
class LossReport:
    task_loss: float
    mec_raw: float
    lam: float
    total: float
    setting: str

    def csv_row(self, step: int, epoch: int) -> list:
        return [step, epoch, self.task_loss, self.mec_raw, self.lam, self.total]


def cross_entropy(z_o, y) -> ad.Tensor:
    """Mean negative log-softmax of the true class; logits are c x m."""
    zt = ad.as_tensor(z_o)
    if zt.values.ndim != 2:
        raise ValidationError(f"logits must be 2-d (classes x batch), got {zt.values.shape}")
    c, m = zt.values.shape
    y = np.asarray(y)
    if y.shape != (m,):
        raise ValidationError(f"labels must have shape ({m},), got {y.shape}")
    if y.dtype.kind not in "iu" or y.min() < 0 or y.max() >= c:
        raise ValidationError(f"labels must be integers in [0, {c})")
    onehot = np.zeros((c, m))
    onehot[y, np.arange(m)] = 1.0
    logp = ad.softmax_logsum(zt, axis=0)
    return ad.scale(ad.reduce_sum(ad.mul(logp, ad.constant(onehot))), -1.0 / m)


def _log_softmax_np(v: np.ndarray) -> np.ndarray:
    s = v - v.max(axis=0, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=0, keepdims=True))


def kd_kl(z_o, z_t) -> ad.Tensor:
    """Mean KL(softmax(teacher) || softmax(student)) at temperature 1.

    The teacher side is a plain array (or a tensor treated as one), so no
    gradient reaches it.
    """
    zs = ad.as_tensor(z_o)
    tv = z_t.values if isinstance(z_t, ad.Tensor) else np.asarray(z_t)
    if zs.values.shape != tv.shape or zs.values.ndim != 2:
        raise ValidationError(f"logit shapes differ: student {zs.values.shape}, teacher {tv.shape}")
    m = tv.shape[1]
    logp_t = _log_softmax_np(np.asarray(tv, dtype=np.float64))
    p_t = np.exp(logp_t)
    entropy_side = float(np.sum(p_t * logp_t)) / m
    logp_s = ad.softmax_logsum(zs, axis=0)
    cross = ad.scale(ad.reduce_sum(ad.mul(logp_s, ad.constant(p_t))), -1.0 / m)
    return ad.add(cross, ad.constant(np.float64(entropy_side)))


def total_loss(
    z_o,
    z_b=None,
    *,
    labels=None,
    teacher_logits=None,
    lam: float = 0.0,
    mec_cfg: Optional[mec_mod.MecConfig] = None,
    gnet=None,
    ctx=None,
    setting: str = "A",
):
    """Composite objective: task term plus the signed, weighted MEC term.

    With maximize_entropy (the default) the coding length is subtracted,
    so minimizing the total pushes entropy up. Pass mec_cfg=None for a
    plain baseline. Returns (scalar Tensor, LossReport).
    """
    if lam < 0:
        raise ValidationError(f"lambda must be >= 0, got {lam}")
    if setting == "A":
        if labels is None:
            raise ValidationError("setting A needs labels")
        task = cross_entropy(z_o, labels)
    elif setting == "B":
        if teacher_logits is None:
            raise ValidationError("setting B needs teacher logits")
        task = kd_kl(z_o, teacher_logits)
    else:
        raise ValidationError(f"unknown setting {setting!r}")

    if mec_cfg is None:
        report = LossReport(task.item(), 0.0, float(lam), task.item(), setting)
        return task, report

    if z_b is None or gnet is None or ctx is None:
        raise ValidationError("MEC term needs backbone features, a gating net and a context")
    mec_t = mec_mod.mec_loss(z_b, mec_cfg, gnet, ctx)
    sign = -1.0 if mec_cfg.maximize_entropy else 1.0
    total = ad.add(task, ad.scale(mec_t, sign * float(lam)))
    report = LossReport(task.item(), mec_t.item(), float(lam), total.item(), setting)
    return total, report
