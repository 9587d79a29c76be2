"""Training losses: polarity cross-entropy, concordance loss, soft Dice,
the CE + lambda*Dice composite, and masked focal loss.

Every loss returns a LossValue whose `value` is a differentiable scalar
tensor; `finite_difference_check` verifies the automatic gradients against
central differences. Reductions use fixed summation order so results are
reproducible across thread counts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from .core import Polarity
from .errors import DegenerateInputError, DomainError, ShapeError

PROB_CLAMP = 1e-7


@dataclass
class LossValue:
    """Scalar loss plus per-term breakdown; breakdown terms sum to `value`."""

    value: torch.Tensor
    breakdown: dict[str, torch.Tensor]

    def item(self) -> float:
        return float(self.value.detach())


def _as_float_tensor(x, name: str) -> torch.Tensor:
    t = torch.as_tensor(x)
    if not torch.is_floating_point(t):
        t = t.double()
    if not torch.isfinite(t).all():
        raise ShapeError(f"{name}: contains non-finite values")
    return t


def _polarity_indices(labels) -> torch.Tensor:
    if isinstance(labels, torch.Tensor):
        return labels.long()
    return torch.as_tensor(
        [lbl.value if isinstance(lbl, Polarity) else int(lbl) for lbl in labels],
        dtype=torch.long,
    )


def polarity_cross_entropy(logits, labels) -> LossValue:
    """Mean negative log-probability of the true polarity class.

    One independent instance is used per dimension (valence, arousal); logits
    are normalized to a probability simplex via softmax.
    """
    logits = _as_float_tensor(logits, "logits")
    idx = _polarity_indices(labels)
    if logits.ndim != 2 or logits.shape[1] != 3:
        raise ShapeError(f"logits: expected (N, 3), got {tuple(logits.shape)}")
    if idx.ndim != 1 or idx.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"labels: expected {logits.shape[0]} entries, got {tuple(idx.shape)}"
        )
    if logits.shape[0] < 1:
        raise ShapeError("logits: need at least one row")
    value = F.cross_entropy(logits, idx)
    return LossValue(value, {"cross_entropy": value})


def _concordance(predictions: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    # population (1/N) convention throughout, so 2*rho*sigma_p*sigma_t == 2*cov
    mp, mt = predictions.mean(), targets.mean()
    vp = ((predictions - mp) ** 2).mean()
    vt = ((targets - mt) ** 2).mean()
    cov = ((predictions - mp) * (targets - mt)).mean()
    return 2.0 * cov / (vp + vt + (mp - mt) ** 2)


def ccc_loss(predictions, targets) -> LossValue:
    """1 minus the concordance correlation coefficient; range [0, 2]."""
    p = _as_float_tensor(predictions, "predictions")
    t = _as_float_tensor(targets, "targets")
    if p.ndim != 1 or t.ndim != 1 or p.shape != t.shape:
        raise ShapeError(f"expected matching 1-D vectors, got {tuple(p.shape)} vs {tuple(t.shape)}")
    if p.shape[0] < 2:
        raise ShapeError("need at least 2 samples for concordance")
    sp = float(((p - p.mean()) ** 2).mean().sqrt().detach())
    st = float(((t - t.mean()) ** 2).mean().sqrt().detach())
    if sp < 1e-12 and st < 1e-12:
        raise DegenerateInputError("both inputs are constant; concordance undefined")
    value = 1.0 - _concordance(p, t)
    return LossValue(value, {"ccc": value})


def dice_loss(probabilities, labels) -> LossValue:
    """Soft multi-class Dice loss.

    Per class i present in the batch: soft-TP is the summed class-i
    probability over true class-i rows, soft-FP the summed class-i
    probability over the other rows, soft-FN the summed (1 - p_i) over true
    class-i rows; the loss is 1 - mean_i 2TP/(2TP + FP + FN). On hard one-hot
    rows this equals the plain count formula. Classes absent from the batch
    are skipped. The probability weighting exists because the count formula
    is piecewise constant and has zero gradient.
    """
    probs = _as_float_tensor(probabilities, "probabilities")
    if probs.ndim != 2 or probs.shape[1] < 2:
        raise ShapeError(f"probabilities: expected (N, K>=2), got {tuple(probs.shape)}")
    idx = torch.as_tensor(labels, dtype=torch.long)
    if idx.ndim != 1 or idx.shape[0] != probs.shape[0]:
        raise ShapeError(f"labels: expected {probs.shape[0]} entries, got {tuple(idx.shape)}")
    n, k = probs.shape
    if n == 0:
        raise DegenerateInputError("empty batch: every class is absent")
    if idx.min() < 0 or idx.max() >= k:
        raise ShapeError(f"labels: values outside [0, {k})")
    # loose tolerance: catches logits passed by mistake while still admitting
    # finite-difference perturbations of valid rows
    row_sums = probs.detach().sum(dim=1)
    if (probs.detach() < -1e-6).any() or (row_sums - 1.0).abs().max() > 1e-3:
        raise ShapeError("probabilities: rows must lie on the probability simplex")

    present = torch.unique(idx, sorted=True)
    dice_terms = []
    for cls in present.tolist():
        in_class = idx == cls
        p_cls = probs[:, cls]
        tp = p_cls[in_class].sum()
        fp = p_cls[~in_class].sum()
        fn = (1.0 - p_cls[in_class]).sum()
        dice_terms.append(2.0 * tp / (2.0 * tp + fp + fn))
    value = 1.0 - torch.stack(dice_terms).mean()
    return LossValue(value, {"dice": value})


def composite_classification_loss(logits, labels, lam: float) -> LossValue:
    """Cross-entropy plus lam times the soft Dice loss on the softmax outputs."""
    logits = _as_float_tensor(logits, "logits")
    idx = torch.as_tensor(labels, dtype=torch.long)
    if logits.ndim != 2:
        raise ShapeError(f"logits: expected (N, K), got {tuple(logits.shape)}")
    ce = F.cross_entropy(logits, idx)
    dice = dice_loss(F.softmax(logits, dim=1), idx).value
    weighted_dice = lam * dice
    return LossValue(ce + weighted_dice, {"cross_entropy": ce, "dice": weighted_dice})


def focal_loss(probabilities, labels, mask=None, alpha: float = 0.25, gamma: float = 2.0) -> LossValue:
    """Masked mean of -alpha_t (1 - p_t)^gamma log(p_t) over binary cells.

    p_t is the predicted probability of the true binary label per cell;
    alpha_t weights positives by `alpha` and negatives by 1 - alpha. Inputs
    are clamped 1e-7 away from {0, 1} since the formula is singular there.
    Mask entry 0 excludes a cell from the mean entirely.
    """
    probs = _as_float_tensor(probabilities, "probabilities")
    lbl = _as_float_tensor(labels, "labels")
    if probs.shape != lbl.shape:
        raise ShapeError(f"labels shape {tuple(lbl.shape)} differs from probabilities {tuple(probs.shape)}")
    if mask is None:
        m = torch.ones_like(probs)
    else:
        m = _as_float_tensor(mask, "mask")
        if m.shape != probs.shape:
            raise ShapeError(f"mask shape {tuple(m.shape)} differs from probabilities {tuple(probs.shape)}")
    total = m.sum()
    if float(total) == 0.0:
        raise DegenerateInputError("mask excludes every cell")

    p = probs.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    p_t = p * lbl + (1.0 - p) * (1.0 - lbl)
    alpha_t = alpha * lbl + (1.0 - alpha) * (1.0 - lbl)
    cell = -alpha_t * (1.0 - p_t) ** gamma * torch.log(p_t)
    value = (cell * m).sum() / total
    return LossValue(value, {"focal": value})


def _scalar_of(result) -> torch.Tensor:
    if isinstance(result, LossValue):
        return result.value
    return result


def finite_difference_check(
    loss_fn: Callable[..., "LossValue | torch.Tensor"],
    inputs: Sequence,
    epsilon: float = 1e-5,
) -> float:
    """Max relative error between autograd gradients and central differences.

    `loss_fn` is called with the differentiable inputs only; bind labels and
    other constants in a closure. Relative error uses max(|g_fd|, 1e-8) as
    the denominator. Runs in double precision.
    """
    if not (1e-7 <= epsilon <= 1e-3):
        raise DomainError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    leaves = [
        torch.as_tensor(x, dtype=torch.float64).detach().clone().requires_grad_(True)
        for x in inputs
    ]
    out = _scalar_of(loss_fn(*leaves))
    analytic = torch.autograd.grad(out, leaves)

    max_rel = 0.0
    with torch.no_grad():
        for which, leaf in enumerate(leaves):
            base = leaf.detach().clone()
            flat = base.reshape(-1)  # view into base
            grad_flat = analytic[which].reshape(-1)
            args = [l.detach() for l in leaves]
            args[which] = base
            for j in range(flat.numel()):
                orig = float(flat[j])
                flat[j] = orig + epsilon
                f_plus = float(_scalar_of(loss_fn(*args)))
                flat[j] = orig - epsilon
                f_minus = float(_scalar_of(loss_fn(*args)))
                flat[j] = orig

                g_fd = (f_plus - f_minus) / (2.0 * epsilon)
                rel = abs(g_fd - float(grad_flat[j])) / max(abs(g_fd), 1e-8)
                max_rel = max(max_rel, rel)
    return max_rel
