"""Training loop for the multi-head model: vanilla or adversarial.

Per batch: optionally replace the clean inputs with adversarial examples
generated against the current model (attacking one freshly drawn head), then
take one momentum-SGD step on the combined objective. Emits a per-step loss
trace and tracks the best epoch by robust accuracy on a held-out slice.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import data as datamod
from .attacks import AttackSpec, generate, pgd
from .losses import LossBreakdown, LossWeights, total_objective
from .model import DioModel, build_model
from .tensor import SGD, Tensor, backward, no_grad

__all__ = [
    "LrSchedule",
    "TrainConfig",
    "TrainTrace",
    "TrainResult",
    "ConfigError",
    "TrainingDiverged",
    "lr_at",
    "train",
    "resolve_datasets",
    "per_head_accuracy",
]


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class LrSchedule:
    initial: float = 0.1
    decay: float = 0.1
    milestones: tuple[int, ...] = ()


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    """Initial rate decayed once per milestone already reached."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    k = sum(1 for m in schedule.milestones if m <= epoch)
    return schedule.initial * schedule.decay**k


@dataclass
class TrainConfig:
    arch: str = "mlp"
    arch_params: dict = field(default_factory=dict)
    dataset: str = "gaussians"
    dataset_params: dict = field(default_factory=dict)
    L: int = 1
    alpha: float = 0.0
    beta: float = 0.0
    tau: float | None = None
    epochs: int = 30
    batch_size: int = 64
    lr: LrSchedule = field(default_factory=LrSchedule)
    momentum: float = 0.9
    weight_decay: float = 5e-4
    adv_train: bool = False
    adv_spec: AttackSpec | None = None
    eval_spec: AttackSpec | None = None
    robust_eval_samples: int = 256
    seed: int = 0

    def validate(self) -> None:
        if self.L < 1:
            raise ConfigError("L: must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs: must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha/beta: must be >= 0")
        if self.beta > 0 and (self.tau is None or self.tau <= 0):
            raise ConfigError("tau: required and > 0 when beta > 0")
        ms = self.lr.milestones
        if list(ms) != sorted(set(ms)):
            raise ConfigError("lr.milestones: must be strictly increasing")
        if any(m >= self.epochs or m < 0 for m in ms):
            raise ConfigError("lr.milestones: must lie in [0, epochs)")
        if self.adv_train and self.adv_spec is None:
            raise ConfigError("adv_spec: required when adv_train is true")

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "arch_params": dict(self.arch_params),
            "dataset": self.dataset,
            "dataset_params": dict(self.dataset_params),
            "L": self.L,
            "alpha": self.alpha,
            "beta": self.beta,
            "tau": self.tau,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": {"initial": self.lr.initial, "decay": self.lr.decay, "milestones": list(self.lr.milestones)},
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "adv_train": self.adv_train,
            "adv_spec": self.adv_spec.to_dict() if self.adv_spec else None,
            "eval_spec": self.eval_spec.to_dict() if self.eval_spec else None,
            "robust_eval_samples": self.robust_eval_samples,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        if "lr" in raw and isinstance(raw["lr"], dict):
            lr = dict(raw["lr"])
            lr["milestones"] = tuple(lr.get("milestones", ()))
            raw["lr"] = LrSchedule(**lr)
        for key in ("adv_spec", "eval_spec"):
            if raw.get(key) is not None and isinstance(raw[key], dict):
                raw[key] = AttackSpec.from_dict(raw[key])
        return cls(**raw)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_acc_per_head: list[float]
    test_acc_per_head: list[float]
    robust_acc: float
    is_best: bool


@dataclass
class TrainTrace:
    steps: list[tuple[int, int, LossBreakdown]] = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_robust: float = -1.0

    def write_csv(self, path: str) -> None:
        with open(path, "w") as f:
            f.write(",".join(LossBreakdown.CSV_HEADER) + "\n")
            for epoch, step, bd in self.steps:
                f.write(",".join(repr(v) for v in bd.csv_row(epoch, step)) + "\n")

    def final_breakdown(self) -> LossBreakdown:
        return self.steps[-1][2]

    def final_epoch_mean(self, term: str) -> float:
        """Mean of one loss term over the last epoch's steps."""
        last = self.steps[-1][0]
        vals = [getattr(bd, term) for e, _, bd in self.steps if e == last]
        return float(np.mean(vals))


@dataclass
class TrainResult:
    model: DioModel          # last epoch
    best_model: DioModel     # highest robust accuracy on the held-out slice
    trace: TrainTrace
    config: TrainConfig
    seconds: float


def resolve_datasets(config: TrainConfig) -> tuple[datamod.Dataset, datamod.Dataset]:
    if config.dataset == "gaussians":
        p = dict(config.dataset_params)
        base_seed = int(p.pop("seed", 0))
        train = datamod.make_gaussians(seed=base_seed, split="train", **p)
        test = datamod.make_gaussians(seed=base_seed + 1, split="test", **p)
        return train, test
    if config.dataset == "idx":
        p = config.dataset_params
        k = p.get("num_classes")
        train = datamod.load_idx(p["train_images"], p["train_labels"], num_classes=k, split="train")
        test = datamod.load_idx(p["test_images"], p["test_labels"], num_classes=k, split="test")
        return train, test
    raise ConfigError(f"dataset: unknown id {config.dataset!r}")


def per_head_accuracy(model: DioModel, x: np.ndarray, y: np.ndarray, chunk: int = 2048) -> list[float]:
    """Accuracy (%) of every head on the same inputs."""
    hits = np.zeros(model.num_heads)
    with no_grad():
        for start in range(0, len(x), chunk):
            xs = Tensor(x[start : start + chunk])
            ys = y[start : start + chunk]
            for i, logits in enumerate(model.forward_all_heads(xs)):
                hits[i] += (logits.data.argmax(axis=1) == ys).sum()
    return [float(h / len(x) * 100.0) for h in hits]


def _default_eval_spec(config: TrainConfig) -> AttackSpec:
    eps = config.adv_spec.eps if config.adv_spec is not None else 8.0 / 255.0
    return AttackSpec(kind="pgd", eps=eps, step=eps / 4.0, iters=20, seed=config.seed)


def _snapshot(model: DioModel) -> list[np.ndarray]:
    return [p.data.copy() for p in model.parameters()]


def _restore_into(model: DioModel, snap: list[np.ndarray]) -> None:
    for p, arr in zip(model.parameters(), snap):
        p.data = arr.copy()


def train(config: TrainConfig, data: tuple[datamod.Dataset, datamod.Dataset] | None = None) -> TrainResult:
    """Run the full training loop; deterministic given the config."""
    config.validate()
    t0 = time.perf_counter()
    train_ds, test_ds = data if data is not None else resolve_datasets(config)

    model = build_model(config.arch, _with_input_info(config, train_ds), train_ds.num_classes,
                        config.L, config.seed)
    opt = SGD(model.parameters(), lr_at(config.lr, 0), momentum=config.momentum,
              weight_decay=config.weight_decay)
    weights = LossWeights(config.alpha, config.beta, config.tau if config.tau is not None else 0.0)
    eval_spec = config.eval_spec if config.eval_spec is not None else _default_eval_spec(config)

    attack_rng = np.random.default_rng([config.seed, 101])
    headpick_rng = np.random.default_rng([config.seed, 103])

    n_eval = min(config.robust_eval_samples, len(test_ds))
    eval_x, eval_y = test_ds.x[:n_eval], test_ds.y[:n_eval]

    trace = TrainTrace()
    best_snap = _snapshot(model)
    trace.best_epoch, trace.best_robust = 0, -1.0

    for epoch in range(config.epochs):
        opt.lr = lr_at(config.lr, epoch)
        for step, (xb, yb) in enumerate(datamod.batches(train_ds, config.batch_size, [config.seed, 7, epoch])):
            if config.adv_train:
                head = int(headpick_rng.integers(model.num_heads))
                adv = pgd(lambda xt: model.forward_head(xt, head), xb, yb, config.adv_spec,
                          rng=attack_rng)
                xb = adv.x_adv
            total, bd = total_objective(model, xb, yb, weights)
            if not np.isfinite(bd.total):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}: {bd}")
            backward(total)
            opt.step()
            trace.steps.append((epoch, step, bd))

        train_accs = per_head_accuracy(model, train_ds.x, train_ds.y)
        test_accs = per_head_accuracy(model, test_ds.x, test_ds.y)
        robust = _robust_eval(model, eval_x, eval_y, eval_spec, epoch)
        is_best = robust > trace.best_robust
        if is_best:
            trace.best_robust = robust
            trace.best_epoch = epoch
            best_snap = _snapshot(model)
        trace.epochs.append(EpochRecord(epoch, opt.lr, train_accs, test_accs, robust, is_best))

    best_model = build_model(config.arch, _with_input_info(config, train_ds), train_ds.num_classes,
                             config.L, config.seed)
    _restore_into(best_model, best_snap)
    return TrainResult(model=model, best_model=best_model, trace=trace, config=config,
                       seconds=time.perf_counter() - t0)


def _robust_eval(model: DioModel, x: np.ndarray, y: np.ndarray, spec: AttackSpec, epoch: int) -> float:
    rng = np.random.default_rng([spec.seed, 977, epoch])
    batch = generate(model, x, y, spec, rng=rng)
    preds = model.predict(batch.x_adv, rng=np.random.default_rng([spec.seed, 978, epoch]))
    return float(np.mean(preds == y) * 100.0)


def _with_input_info(config: TrainConfig, ds: datamod.Dataset) -> dict:
    params = dict(config.arch_params)
    if config.arch == "mlp":
        params.setdefault("input_dim", int(np.prod(ds.input_shape)))
    else:
        params.setdefault("input_shape", tuple(int(v) for v in ds.input_shape))
    return params
