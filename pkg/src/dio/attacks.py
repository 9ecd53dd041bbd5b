"""White-box, black-box, and adaptive attack generators.

Gradient attacks work against any differentiable forward function mapping an
input Tensor to logits; the adaptive variants additionally understand the
multi-head model structure. Attacks never modify model parameters and every
output respects its norm budget and the [0, 1] pixel box.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np

from .model import DioModel
from .tensor import Tensor, backward, clamp, no_grad, softmax_cross_entropy, tanh

__all__ = [
    "AttackSpec",
    "CwParams",
    "AdversarialBatch",
    "fgsm",
    "pgd",
    "cw_l2",
    "square_l2",
    "transfer",
    "adapt_a1",
    "adapt_a2",
    "generate",
    "random_head_forward",
]

KINDS = ("fgsm", "pgd", "cw_l2", "square_l2", "transfer", "adapt_a1", "adapt_a2")
_L2_KINDS = {"cw_l2", "square_l2"}
_EXCLUDE = 1e30


@dataclass
class CwParams:
    c: float = 0.01
    kappa: float = 0.0
    lr: float = 0.01
    binary_search_steps: int = 9
    max_inner_iters: int = 100


@dataclass
class AttackSpec:
    """Parameters of one attack; eps is L-inf for sign attacks, L2 for cw/square."""

    kind: str
    eps: float
    step: float = 0.0
    iters: int = 1
    seed: int = 0
    random_start: str = "symmetric"  # "symmetric" | "positive" | "none"
    cw: CwParams = field(default_factory=CwParams)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; known: {KINDS}")
        if self.eps < 0:
            raise ValueError("eps must be >= 0")
        if self.kind in ("pgd", "adapt_a1", "adapt_a2") and self.iters < 1:
            raise ValueError(f"{self.kind} needs iters >= 1")
        if self.iters < 0:
            raise ValueError("iters must be >= 0")
        if self.random_start not in ("symmetric", "positive", "none"):
            raise ValueError(f"unknown random_start {self.random_start!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "AttackSpec":
        raw = dict(raw)
        cw = raw.pop("cw", None)
        spec = cls(**raw)
        if cw:
            spec.cw = CwParams(**cw)
        return spec


@dataclass
class AdversarialBatch:
    """One attack's output: perturbed inputs plus per-sample diagnostics."""

    x_adv: np.ndarray
    x_clean: np.ndarray
    y: np.ndarray
    norms: np.ndarray
    norm_kind: str
    success: np.ndarray
    spec: AttackSpec
    queries: int | None = None

    def to_json_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "norm_kind": self.norm_kind,
            "norms": [float(v) for v in self.norms],
            "success": [bool(v) for v in self.success],
            "success_rate": float(np.mean(self.success)),
            "queries": self.queries,
            "n": int(self.x_adv.shape[0]),
        }


def _per_sample_linf(delta: np.ndarray) -> np.ndarray:
    return np.abs(delta).reshape(delta.shape[0], -1).max(axis=1)


def _per_sample_l2(delta: np.ndarray) -> np.ndarray:
    return np.sqrt((delta * delta).reshape(delta.shape[0], -1).sum(axis=1))


def _predictions(forward_fn, x: np.ndarray) -> np.ndarray:
    with no_grad():
        return forward_fn(Tensor(x)).data.argmax(axis=1)


def random_head_forward(model: DioModel, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    """Forward closure drawing a fresh uniform head on every call."""

    def fwd(xt: Tensor) -> Tensor:
        logits, _ = model.forward_random_head(xt, rng)
        return logits

    return fwd


def _input_gradient(loss_fn, xa: np.ndarray) -> np.ndarray:
    xt = Tensor(xa, requires_grad=True)
    loss = loss_fn(xt)
    backward(loss, wrt=[xt])
    g = xt.grad
    if g is None or not np.all(np.isfinite(g)):
        raise FloatingPointError("attack: non-finite input gradient")
    return g


def _signed_ascent(loss_fn, x: np.ndarray, eps: float, step: float, iters: int,
                   rng: np.random.Generator, random_start: str) -> np.ndarray:
    """Iterated signed gradient steps projected onto the eps ball and the box."""
    x0 = np.asarray(x, dtype=np.float64)
    if random_start == "symmetric":
        xa = x0 + rng.uniform(-eps, eps, size=x0.shape)
    elif random_start == "positive":
        xa = x0 + rng.uniform(0.0, eps, size=x0.shape)
    else:
        xa = x0.copy()
    xa = np.clip(xa, 0.0, 1.0)
    for _ in range(iters):
        g = _input_gradient(loss_fn, xa)
        xa = xa + step * np.sign(g)
        xa = np.clip(xa, x0 - eps, x0 + eps)
        xa = np.clip(xa, 0.0, 1.0)
    return xa


def _finish_linf(x_adv, x, y, forward_fn, spec) -> AdversarialBatch:
    preds = _predictions(forward_fn, x_adv)
    return AdversarialBatch(
        x_adv=x_adv,
        x_clean=np.asarray(x, dtype=np.float64),
        y=np.asarray(y),
        norms=_per_sample_linf(x_adv - x),
        norm_kind="linf",
        success=preds != np.asarray(y),
        spec=spec,
    )


def fgsm(forward_fn, x, y, eps: float) -> AdversarialBatch:
    """Single signed-gradient step of size eps on the cross-entropy."""
    x0 = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    g = _input_gradient(lambda xt: softmax_cross_entropy(forward_fn(xt), y), x0)
    x_adv = np.clip(x0 + eps * np.sign(g), 0.0, 1.0)
    spec = AttackSpec(kind="fgsm", eps=eps)
    return _finish_linf(x_adv, x0, y, forward_fn, spec)


def pgd(forward_fn, x, y, spec: AttackSpec, rng: np.random.Generator | None = None) -> AdversarialBatch:
    """Projected signed-gradient descent inside the L-inf ball, random start."""
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    y = np.asarray(y)
    loss_fn = lambda xt: softmax_cross_entropy(forward_fn(xt), y)
    x_adv = _signed_ascent(loss_fn, x, spec.eps, spec.step, spec.iters, rng, spec.random_start)
    return _finish_linf(x_adv, x, y, forward_fn, spec)


def adapt_a1(model: DioModel, x, y, spec: AttackSpec, rng: np.random.Generator | None = None) -> AdversarialBatch:
    """PGD driven by the head-averaged cross-entropy; no head randomness left."""
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    y = np.asarray(y)

    def loss_fn(xt: Tensor) -> Tensor:
        logits_all = model.forward_all_heads(xt)
        total = softmax_cross_entropy(logits_all[0], y)
        for logits in logits_all[1:]:
            total = total + softmax_cross_entropy(logits, y)
        return total / float(model.num_heads)

    x_adv = _signed_ascent(loss_fn, x, spec.eps, spec.step, spec.iters, rng, spec.random_start)
    eval_rng = np.random.default_rng(spec.seed + 1)
    return _finish_linf(x_adv, x, y, random_head_forward(model, eval_rng), spec)


def adapt_a2(model: DioModel, head_index: int, x, y, spec: AttackSpec,
             rng: np.random.Generator | None = None) -> AdversarialBatch:
    """PGD against the single path formed by one head over the shared backbone."""
    if not 0 <= head_index < model.num_heads:
        raise ValueError(f"head_index {head_index} out of range [0, {model.num_heads})")
    forward_fn = lambda xt: model.forward_head(xt, head_index)
    return pgd(forward_fn, x, y, spec, rng=rng)


def cw_l2(forward_fn, x, y, spec: AttackSpec) -> AdversarialBatch:
    """Carlini-Wagner L2: tanh-space gradient descent with binary search on c.

    Returns, per sample, the lowest-distortion misclassifying input found
    whose L2 distance fits the spec budget; otherwise the clean input with
    success=False. The squared distance is optimized (smooth at zero
    perturbation); reported norms are plain L2.
    """
    x0 = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n = x0.shape[0]
    cw = spec.cw

    zeta0 = np.arctanh(2.0 * np.clip(x0, 1e-6, 1.0 - 1e-6) - 1.0)
    c = np.full(n, cw.c)
    c_lo = np.zeros(n)
    c_hi = np.full(n, np.inf)
    best_adv = x0.copy()
    best_l2 = np.full(n, np.inf)
    ever_success = np.zeros(n, dtype=bool)

    def record(xa: np.ndarray, logits_data: np.ndarray) -> np.ndarray:
        preds = logits_data.argmax(axis=1)
        l2 = _per_sample_l2(xa - x0)
        hit = (preds != y) & (l2 < best_l2)
        if hit.any():
            best_adv[hit] = xa[hit]
            best_l2[hit] = l2[hit]
            ever_success[hit] = True
        return preds != y

    for _ in range(cw.binary_search_steps):
        zeta = zeta0.copy()
        round_success = np.zeros(n, dtype=bool)
        for _ in range(cw.max_inner_iters):
            zt = Tensor(zeta, requires_grad=True)
            xadv_t = (tanh(zt) + 1.0) * 0.5
            delta = xadv_t - Tensor(x0)
            dist2 = (delta * delta).reshape((n, -1)).sum(axis=1)
            logits = forward_fn(xadv_t)
            onehot = np.zeros(logits.shape)
            onehot[np.arange(n), y] = 1.0
            own = (logits * Tensor(onehot)).sum(axis=1)
            other = (logits + Tensor(onehot * -_EXCLUDE)).max(axis=1)
            attack_term = clamp(own - other, lo=-cw.kappa)
            loss = (dist2 + Tensor(c) * attack_term).sum()
            round_success |= record(xadv_t.data, logits.data)
            backward(loss, wrt=[zt])
            zeta = zeta - cw.lr * zt.grad
        with no_grad():
            xa_final = (np.tanh(zeta) + 1.0) * 0.5
            round_success |= record(xa_final, forward_fn(Tensor(xa_final)).data)

        hi = round_success
        c_hi[hi] = np.minimum(c_hi[hi], c[hi])
        c_lo[~hi] = np.maximum(c_lo[~hi], c[~hi])
        bounded = np.isfinite(c_hi)
        c[bounded] = 0.5 * (c_lo[bounded] + c_hi[bounded])
        c[~bounded] *= 10.0

    within = ever_success & (best_l2 <= spec.eps + 1e-12)
    x_adv = np.where(within.reshape((-1,) + (1,) * (x0.ndim - 1)), best_adv, x0)
    return AdversarialBatch(
        x_adv=x_adv,
        x_clean=x0,
        y=y,
        norms=_per_sample_l2(x_adv - x0),
        norm_kind="l2",
        success=within,
        spec=spec,
    )


def _margin_scores(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Attack objective: true-class logit minus best competitor (< 0 means fooled)."""
    n = logits.shape[0]
    own = logits[np.arange(n), y]
    rest = logits.copy()
    rest[np.arange(n), y] = -np.inf
    return own - rest.max(axis=1)


def square_l2(query_fn, x, y, spec: AttackSpec, p_init: float = 0.1) -> AdversarialBatch:
    """Random-search black-box attack with localized square proposals.

    ``query_fn`` maps a plain input array to a logits array; no gradients are
    ever used. A proposal is kept per sample only if it strictly lowers the
    margin score, so the attack loss is non-increasing. The total perturbation
    is projected onto the L2 ball of radius eps before every query.
    """
    x0 = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n = x0.shape[0]
    if x0.ndim == 4:
        _, ch, h, w = x0.shape
        grid = x0.reshape(n, ch, h, w)
    else:
        ch, h, w = 1, 1, int(np.prod(x0.shape[1:]))
        grid = x0.reshape(n, 1, 1, w)

    rng = np.random.default_rng(spec.seed)
    delta = np.zeros_like(grid)
    queries = 0

    if spec.iters == 0:
        return AdversarialBatch(
            x_adv=x0.copy(), x_clean=x0, y=y,
            norms=np.zeros(n), norm_kind="l2",
            success=np.zeros(n, dtype=bool), spec=spec, queries=0,
        )

    cur_logits = np.asarray(query_fn(grid.reshape(x0.shape)))
    queries += 1
    cur_loss = _margin_scores(cur_logits, y)

    d_pixels = h * w
    while queries < spec.iters:
        frac_done = queries / spec.iters
        p = p_init * 0.5 ** int(10 * frac_done)
        side = max(1, round(np.sqrt(p * d_pixels)))
        side = min(side, h, w)

        rows = rng.integers(0, h - side + 1, size=n)
        cols = rng.integers(0, w - side + 1, size=n)
        values = (spec.eps / max(side, 1)) * rng.choice([-1.0, 1.0], size=(n, ch, side, side))

        cand = delta.copy()
        idx_n = np.arange(n)[:, None, None, None]
        idx_c = np.arange(ch)[None, :, None, None]
        idx_h = rows[:, None, None, None] + np.arange(side)[None, None, :, None]
        idx_w = cols[:, None, None, None] + np.arange(side)[None, None, None, :]
        cand[idx_n, idx_c, idx_h, idx_w] = values

        flat = cand.reshape(n, -1)
        nrm = np.sqrt((flat * flat).sum(axis=1))
        scale = np.minimum(1.0, spec.eps / np.maximum(nrm, 1e-300))
        cand *= scale.reshape(-1, 1, 1, 1)

        x_cand = np.clip(grid + cand, 0.0, 1.0)
        cand_eff = x_cand - grid
        logits = np.asarray(query_fn(x_cand.reshape(x0.shape)))
        queries += 1
        cand_loss = _margin_scores(logits, y)

        accept = cand_loss < cur_loss
        delta[accept] = cand_eff[accept]
        cur_loss[accept] = cand_loss[accept]
        cur_logits[accept] = logits[accept]

    x_adv = np.clip(grid + delta, 0.0, 1.0).reshape(x0.shape)
    return AdversarialBatch(
        x_adv=x_adv,
        x_clean=x0,
        y=y,
        norms=_per_sample_l2(x_adv - x0),
        norm_kind="l2",
        success=cur_logits.argmax(axis=1) != y,
        spec=spec,
        queries=queries,
    )


def transfer(source_model: DioModel, target_model: DioModel, x, y, inner: AttackSpec,
             rng: np.random.Generator | None = None) -> float:
    """Robust accuracy (%) of the target on examples crafted against the source."""
    if source_model.num_classes != target_model.num_classes:
        raise ValueError("transfer: source and target must share the class count")
    rng = rng if rng is not None else np.random.default_rng(inner.seed)
    batch = generate(source_model, x, y, inner, rng=rng)
    eval_rng = np.random.default_rng(inner.seed + 1)
    preds = target_model.predict(batch.x_adv, rng=eval_rng)
    return float(np.mean(preds == np.asarray(y)) * 100.0)


def generate(model: DioModel, x, y, spec: AttackSpec, rng: np.random.Generator | None = None,
             head_index: int | None = None) -> AdversarialBatch:
    """Dispatch one attack against a multi-head model.

    White-box sign attacks differentiate through a freshly drawn random head
    per forward call, matching the randomized inference strategy.
    """
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    if spec.kind == "fgsm":
        return fgsm(random_head_forward(model, rng), x, y, spec.eps)
    if spec.kind == "pgd":
        return pgd(random_head_forward(model, rng), x, y, spec, rng=rng)
    if spec.kind == "adapt_a1":
        return adapt_a1(model, x, y, spec, rng=rng)
    if spec.kind == "adapt_a2":
        if head_index is None:
            raise ValueError("adapt_a2 needs a head_index")
        return adapt_a2(model, head_index, x, y, spec, rng=rng)
    if spec.kind == "cw_l2":
        return cw_l2(random_head_forward(model, rng), x, y, spec)
    if spec.kind == "square_l2":
        query_rng = rng

        def query_fn(x_np: np.ndarray) -> np.ndarray:
            with no_grad():
                logits, _ = model.forward_random_head(Tensor(x_np), query_rng)
            return logits.data

        return square_l2(query_fn, x, y, spec)
    raise ValueError(f"generate: cannot dispatch kind {spec.kind!r}")
