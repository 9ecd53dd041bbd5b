"""Accuracy, robustness, and diagnostic reporting.

Clean and robust accuracies are reported both through the randomized-head
inference path (with the drawn head recorded per sample) and per head.
ROC/AUC follows a one-vs-rest scheme: per-class curves are averaged on a
shared false-positive-rate grid and integrated by trapezoid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import AttackSpec, adapt_a1, adapt_a2, generate, transfer
from .data import Dataset
from .model import DioModel
from .tensor import Tensor, no_grad
from .trainer import TrainConfig, per_head_accuracy, resolve_datasets, train

__all__ = [
    "EvalReport",
    "accuracy",
    "random_head_accuracy",
    "robust_accuracy",
    "roc_auc_per_head",
    "adaptive_per_head",
    "evaluate",
    "tau_sweep",
    "ablation_suite",
]

_FPR_GRID = np.linspace(0.0, 1.0, 101)


def random_head_accuracy(model: DioModel, x: np.ndarray, y: np.ndarray,
                         rng: np.random.Generator, batch_size: int = 64) -> tuple[float, np.ndarray]:
    """Accuracy (%) under randomized-head inference plus per-head draw counts.

    One head is drawn per forward call (= per batch); the drawn index is
    recorded for every sample in that batch.
    """
    if len(x) == 0:
        raise ValueError("empty dataset")
    hits = 0
    counts = np.zeros(model.num_heads, dtype=np.int64)
    with no_grad():
        for start in range(0, len(x), batch_size):
            xs, ys = x[start : start + batch_size], y[start : start + batch_size]
            logits, idx = model.forward_random_head(Tensor(xs), rng)
            hits += int((logits.data.argmax(axis=1) == ys).sum())
            counts[idx] += len(ys)
    return hits / len(x) * 100.0, counts


def accuracy(model: DioModel, dataset: Dataset, rng: np.random.Generator | None = None,
             batch_size: int = 64) -> float:
    """Fraction of argmax-correct predictions, in percent."""
    if rng is None:
        rng = np.random.default_rng(0)
    acc, _ = random_head_accuracy(model, dataset.x, dataset.y, rng, batch_size)
    return acc


def robust_accuracy(model: DioModel, dataset: Dataset, spec: AttackSpec,
                    rng: np.random.Generator | None = None,
                    source_model: DioModel | None = None) -> float:
    """Accuracy (%) on adversarial inputs generated per spec.

    White-box by default; pass ``source_model`` for a transfer evaluation
    (examples crafted on the source, scored on this model).
    """
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    if source_model is not None:
        return transfer(source_model, model, dataset.x, dataset.y, spec, rng=rng)
    batch = generate(model, dataset.x, dataset.y, spec, rng=rng)
    acc, _ = random_head_accuracy(model, batch.x_adv, dataset.y, rng)
    return acc


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _roc_points(scores: np.ndarray, positive: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(-scores, kind="stable")
    pos = positive[order]
    tp = np.cumsum(pos)
    fp = np.cumsum(~pos)
    tpr = np.concatenate(([0.0], tp / tp[-1]))
    fpr = np.concatenate(([0.0], fp / fp[-1]))
    # collapse duplicate fpr values to their top tpr so linear interp is well defined
    rev_f, rev_t = fpr[::-1], tpr[::-1]
    uniq, first_rev = np.unique(rev_f, return_index=True)
    return uniq, rev_t[first_rev]


def roc_auc_per_head(model: DioModel, dataset: Dataset, chunk: int = 2048) -> list[float]:
    """One-vs-rest AUC per head: class curves averaged on a common FPR grid."""
    k = dataset.num_classes
    if k < 2:
        raise ValueError("ROC needs at least 2 classes")
    present = np.bincount(dataset.y, minlength=k)
    missing = np.nonzero(present == 0)[0]
    if missing.size:
        raise ValueError(f"class {int(missing[0])} absent from dataset")

    probs = [np.empty((len(dataset), k)) for _ in range(model.num_heads)]
    with no_grad():
        for start in range(0, len(dataset), chunk):
            logits = model.forward_all_heads(Tensor(dataset.x[start : start + chunk]))
            for i, lg in enumerate(logits):
                probs[i][start : start + len(lg.data)] = _softmax(lg.data)

    aucs = []
    for head_probs in probs:
        tprs = np.empty((k, _FPR_GRID.size))
        for cls in range(k):
            fpr, tpr = _roc_points(head_probs[:, cls], dataset.y == cls)
            tprs[cls] = np.interp(_FPR_GRID, fpr, tpr)
        aucs.append(float(np.trapezoid(tprs.mean(axis=0), _FPR_GRID)))
    return aucs


def adaptive_per_head(model: DioModel, dataset: Dataset, spec: AttackSpec) -> dict:
    """Per-path robust accuracies under both adaptive attacks.

    The head-averaged attack produces one example set scored by every head;
    the per-path attack scores each head on its own examples.
    """
    a1 = adapt_a1(model, dataset.x, dataset.y, replace(spec, kind="adapt_a1"))
    a1_accs = per_head_accuracy(model, a1.x_adv, dataset.y)
    a2_accs = []
    for i in range(model.num_heads):
        batch = adapt_a2(model, i, dataset.x, dataset.y, replace(spec, kind="adapt_a2"))
        a2_accs.append(per_head_accuracy(model, batch.x_adv, dataset.y)[i])
    return {"adapt_a1": a1_accs, "adapt_a2": a2_accs}


@dataclass
class EvalReport:
    """Full evaluation of one model: clean, per-attack robust, and AUC blocks."""

    n: int
    seed: int
    clean_random_head: float
    clean_per_head: list[float]
    head_draw_counts: list[int]
    auc_per_head: list[float]
    attacks: list[dict] = field(default_factory=list)
    config_echo: dict | None = None

    def to_json_dict(self) -> dict:
        return {
            "n": self.n,
            "seed": self.seed,
            "clean": {
                "random_head": self.clean_random_head,
                "per_head": self.clean_per_head,
                "head_draw_counts": self.head_draw_counts,
            },
            "auc_per_head": self.auc_per_head,
            "attacks": self.attacks,
            "config_echo": self.config_echo,
        }

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json_dict(), f, indent=2)

    def attack_entry(self, kind: str) -> dict:
        matches = [a for a in self.attacks if a["spec"]["kind"] == kind]
        if len(matches) != 1:
            raise KeyError(f"expected exactly one {kind!r} entry, found {len(matches)}")
        return matches[0]


def evaluate(model: DioModel, dataset: Dataset, specs: list[AttackSpec], seed: int = 0,
             source_model: DioModel | None = None, config_echo: dict | None = None) -> EvalReport:
    """Build the full report; every requested attack appears exactly once."""
    rng = np.random.default_rng([seed, 1])
    clean_acc, counts = random_head_accuracy(model, dataset.x, dataset.y, rng)
    report = EvalReport(
        n=len(dataset),
        seed=seed,
        clean_random_head=clean_acc,
        clean_per_head=per_head_accuracy(model, dataset.x, dataset.y),
        head_draw_counts=[int(c) for c in counts],
        auc_per_head=roc_auc_per_head(model, dataset),
        config_echo=config_echo,
    )
    for i, spec in enumerate(specs):
        entry: dict = {"spec": spec.to_dict()}
        if spec.kind == "transfer":
            if source_model is None:
                raise ValueError("transfer evaluation needs a source model")
            inner = replace(spec, kind="fgsm")
            entry["robust_random_head"] = robust_accuracy(
                model, dataset, inner, rng=np.random.default_rng([seed, 2, i]), source_model=source_model
            )
        elif spec.kind == "adapt_a2":
            per_path = adaptive_per_head(model, dataset, spec)["adapt_a2"]
            entry["robust_per_path"] = per_path
            entry["robust_random_head"] = float(np.mean(per_path))
        else:
            batch = generate(model, dataset.x, dataset.y, spec, rng=np.random.default_rng([seed, 2, i]))
            acc, _ = random_head_accuracy(model, batch.x_adv, dataset.y,
                                          np.random.default_rng([seed, 3, i]))
            entry["robust_random_head"] = acc
            entry["robust_per_head"] = per_head_accuracy(model, batch.x_adv, dataset.y)
            entry["norm_max"] = float(batch.norms.max()) if len(batch.norms) else 0.0
            entry["success_rate"] = float(np.mean(batch.success))
            if batch.queries is not None:
                entry["queries"] = batch.queries
        report.attacks.append(entry)
    return report


def tau_sweep(base_config: TrainConfig, taus, attack_spec: AttackSpec,
              data=None) -> list[dict]:
    """Train one model per margin target (shared seed) and score each."""
    taus = list(taus)
    if len(taus) < 2:
        raise ValueError("tau_sweep needs at least 2 values")
    if base_config.beta <= 0:
        raise ValueError("tau_sweep needs beta > 0 so the margin term is active")
    rows = []
    for tau in taus:
        cfg = replace(base_config, tau=float(tau))
        result = train(cfg, data=data)
        ds = data[1] if data is not None else __import__("dio.trainer", fromlist=["resolve_datasets"]).resolve_datasets(cfg)[1]
        rows.append({
            "tau": float(tau),
            "clean_acc": accuracy(result.model, ds, np.random.default_rng([cfg.seed, 5])),
            "robust_acc": robust_accuracy(result.model, ds, attack_spec,
                                          rng=np.random.default_rng([cfg.seed, 6])),
        })
    return rows


ABLATION_ROWS = ("baseline", "dio_wo_lo", "dio_wo_ld", "dio")


def ablation_suite(base_config: TrainConfig, attack_spec: AttackSpec, data=None) -> list[dict]:
    """The four-row loss-ablation grid, trained with a shared seed.

    Rows: single-head cross-entropy baseline; margin term alone (still one
    head); orthogonality alone (multi-head); both penalties (multi-head).
    """
    if base_config.alpha <= 0 or base_config.beta <= 0 or not base_config.tau:
        raise ValueError("ablation needs a base config with alpha > 0, beta > 0 and tau set")
    variants = {
        "baseline": dict(L=1, alpha=0.0, beta=0.0, tau=None),
        "dio_wo_lo": dict(L=1, alpha=0.0, beta=base_config.beta, tau=base_config.tau),
        "dio_wo_ld": dict(L=base_config.L, alpha=base_config.alpha, beta=0.0, tau=None),
        "dio": dict(L=base_config.L, alpha=base_config.alpha, beta=base_config.beta, tau=base_config.tau),
    }
    rows = []
    for name in ABLATION_ROWS:
        cfg = replace(base_config, **variants[name])
        result = train(cfg, data=data)
        if data is not None:
            test_ds = data[1]
        else:
            from .trainer import resolve_datasets

            test_ds = resolve_datasets(cfg)[1]
        rows.append({
            "name": name,
            "L": cfg.L,
            "alpha": cfg.alpha,
            "beta": cfg.beta,
            "tau": cfg.tau,
            "clean_acc": accuracy(result.model, test_ds, np.random.default_rng([cfg.seed, 5])),
            "robust_acc": robust_accuracy(result.model, test_ds, attack_spec,
                                          rng=np.random.default_rng([cfg.seed, 6])),
        })
    return rows
