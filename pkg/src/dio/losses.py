"""The three training losses and their weighted combination.

  * classification: sum over heads of batch-mean cross-entropy,
  * orthogonality: squared inner products of vectorized head weights,
    summed over all ordered pairs of distinct heads,
  * margin: per-head hinge pushing the normalized minimal logit gap of
    correctly-classified samples up toward a target value.

The margin's sample filter and its argmin over competitor classes are
treated as constant selections during backward; the hyperplane norms in
the denominator stay differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import DioModel, Head
from .tensor import Tensor, absolute, softmax_cross_entropy

# keeps the excluded true-class column out of the min without touching the tape
_EXCLUDE = 1e30
# floor added to hyperplane norms so an all-zero column cannot blow up the division
_NORM_FLOOR = 1e-12

__all__ = [
    "LossWeights",
    "LossBreakdown",
    "classification_loss",
    "orthogonality_loss",
    "margin",
    "margin_loss",
    "total_objective",
]


@dataclass(frozen=True)
class LossWeights:
    alpha: float  # orthogonality penalty
    beta: float   # margin penalty
    tau: float    # margin target

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and np.isfinite(self.beta) and np.isfinite(self.tau)):
            raise ValueError("loss weights must be finite")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.beta > 0 and self.tau <= 0:
            raise ValueError("tau must be > 0 when the margin penalty is active")


@dataclass
class LossBreakdown:
    l_c: float
    l_o: float
    l_d: float
    total: float

    CSV_HEADER = ("epoch", "step", "L_c", "L_o", "L_d", "total")

    def csv_row(self, epoch: int, step: int) -> tuple:
        return (epoch, step, self.l_c, self.l_o, self.l_d, self.total)


def classification_loss(logits_per_head: list[Tensor], labels) -> Tensor:
    """Sum over heads of the batch-mean cross-entropy."""
    total = softmax_cross_entropy(logits_per_head[0], labels)
    for logits in logits_per_head[1:]:
        total = total + softmax_cross_entropy(logits, labels)
    return total


def orthogonality_loss(heads: list[Head]) -> Tensor:
    """Sum of squared weight inner products over ordered pairs of distinct heads."""
    if len(heads) < 2:
        return Tensor(0.0)
    total = None
    for i in range(len(heads)):
        for j in range(i + 1, len(heads)):
            ip = (heads[i].W * heads[j].W).sum()
            sq = ip * ip
            total = sq if total is None else total + sq
    return 2.0 * total  # each unordered pair appears twice in the double sum


def _margins(logits: Tensor, head: Head, labels: np.ndarray) -> Tensor:
    """Per-sample normalized minimal gap to a competitor hyperplane.

    min over j != y of |h_j(z) - h_y(z)| / (||W_j|| + floor); ties in the
    argmin resolve to the lowest class index.
    """
    n, k = logits.shape
    if k < 2:
        raise ValueError("margin needs at least 2 classes")
    norms = head.column_norms()
    if np.any(norms.data <= _NORM_FLOOR):
        raise ValueError("margin: degenerate head with a zero-norm hyperplane column")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    own = (logits * Tensor(onehot)).sum(axis=1, keepdims=True)
    gaps = absolute(logits - own) / (norms + _NORM_FLOOR)
    return (gaps + Tensor(onehot * _EXCLUDE)).min(axis=1)


def margin(z, head: Head, label: int) -> float:
    """Margin of a single feature vector, assumed correctly classified."""
    zt = z if isinstance(z, Tensor) else Tensor(z)
    if zt.ndim == 1:
        zt = zt.reshape((1, -1))
    return float(_margins(head.forward(zt), head, np.asarray([label])).data[0])


def _head_hinge(logits: Tensor, head: Head, labels: np.ndarray, tau: float) -> Tensor:
    """Mean hinge max(0, tau - margin) over the correctly-classified samples."""
    scores = logits.data
    correct = scores.argmax(axis=1) == labels
    count = int(correct.sum())
    if count == 0:
        return Tensor(0.0)
    own = scores[np.arange(len(labels)), labels][correct]
    rest = scores[correct].copy()
    rest[np.arange(count), labels[correct]] = -np.inf
    assert np.all(own >= rest.max(axis=1)), "filtered sample no longer scores its label highest"

    hinge = (Tensor(float(tau)) - _margins(logits, head, labels)).relu()
    return (hinge * Tensor(correct.astype(float))).sum() / count


def margin_loss(model: DioModel, head_index: int, x: Tensor | np.ndarray, labels, tau: float) -> Tensor:
    """One head's mean hinge term over a batch (0 if nothing is classified correctly)."""
    xt = x if isinstance(x, Tensor) else Tensor(x)
    labels = np.asarray(labels, dtype=np.int64)
    head = model.heads[head_index]
    logits = head.forward(model.backbone.forward(xt))
    return _head_hinge(logits, head, labels, tau)


def total_objective(model: DioModel, x: Tensor | np.ndarray, labels, weights: LossWeights) -> tuple[Tensor, LossBreakdown]:
    """Combined loss l_c + alpha*l_o + beta*l_d, with its per-term breakdown.

    The backbone runs once; each head's logits are shared between the
    classification and margin terms through tape fan-out.
    """
    xt = x if isinstance(x, Tensor) else Tensor(x)
    labels = np.asarray(labels, dtype=np.int64)
    z = model.backbone.forward(xt)
    logits_per_head = [h.forward(z) for h in model.heads]

    l_c = classification_loss(logits_per_head, labels)
    l_o = orthogonality_loss(model.heads)

    if weights.beta > 0:
        hinge_sum = None
        for head, logits in zip(model.heads, logits_per_head):
            term = _head_hinge(logits, head, labels, weights.tau)
            hinge_sum = term if hinge_sum is None else hinge_sum + term
        l_d = hinge_sum / float(model.num_heads)
    else:
        l_d = Tensor(0.0)

    total = l_c + weights.alpha * l_o + weights.beta * l_d
    breakdown = LossBreakdown(
        l_c=float(l_c.data),
        l_o=float(l_o.data),
        l_d=float(l_d.data),
        total=float(total.data),
    )
    return total, breakdown
