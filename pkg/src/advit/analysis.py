"""Attack effectiveness, epsilon sweeps, perturbation rendering and feature visualization."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from . import autodiff as ad
from .attacks import AttackSpec, pgd, run_attack
from .autodiff import Tensor

EFFECTIVENESS_MODES = ("faithful", "union", "trajectory")


def _logits(model, x: np.ndarray) -> np.ndarray:
    out = model(Tensor(np.asarray(x, dtype=np.float64)))
    return out.data if isinstance(out, Tensor) else np.asarray(out)


# ------------------------------------------------------ attack effectiveness


def effectiveness(loss_k: np.ndarray, loss_oracle: np.ndarray) -> np.ndarray:
    """Per-sample relative gap (L_k - L_O) / L_O."""
    loss_k = np.asarray(loss_k, dtype=np.float64)
    loss_oracle = np.asarray(loss_oracle, dtype=np.float64)
    return (loss_k - loss_oracle) / np.maximum(loss_oracle, np.finfo(np.float64).tiny)


@dataclass
class EffectivenessReport:
    mode: str
    k_list: tuple[int, ...]
    oracle_steps: int
    num_samples: int
    # (seeds, K, N) and (seeds, N)
    loss_k: np.ndarray = field(repr=False)
    loss_oracle: np.ndarray = field(repr=False)
    confidence: float = 0.95

    @property
    def d(self) -> np.ndarray:
        """Signed per-sample d_k, shape (seeds, K, N)."""
        return effectiveness(self.loss_k, self.loss_oracle[:, None, :])

    @property
    def mean(self) -> np.ndarray:
        return self.d.mean(axis=(0, 2))

    @property
    def abs_mean(self) -> np.ndarray:
        return np.abs(self.d).mean(axis=(0, 2))

    @property
    def interval(self) -> np.ndarray:
        """Normal-approximation interval over seeds of the per-seed sample mean, shape (K, 2)."""
        per_seed = self.d.mean(axis=2)
        n = per_seed.shape[0]
        mu = per_seed.mean(axis=0)
        if n < 2:
            return np.stack([mu, mu], axis=1)
        half = stats.norm.ppf(0.5 + self.confidence / 2) * per_seed.std(axis=0, ddof=1) / np.sqrt(n)
        return np.stack([mu - half, mu + half], axis=1)

    def records(self) -> list[dict]:
        ci = self.interval
        return [
            {
                "mode": self.mode,
                "k": k,
                "oracle_steps": self.oracle_steps,
                "num_samples": self.num_samples,
                "seeds": self.loss_k.shape[0],
                "d_mean": float(self.mean[i]),
                "d_abs_mean": float(self.abs_mean[i]),
                "ci_low": float(ci[i, 0]),
                "ci_high": float(ci[i, 1]),
            }
            for i, k in enumerate(self.k_list)
        ]


def attack_effectiveness(
    model,
    x: np.ndarray,
    y: np.ndarray,
    epsilon: float,
    k_list: Sequence[int] = (1, 2, 5, 10),
    oracle_steps: int = 200,
    mode: str = "union",
    seeds: int = 3,
    norm: str = "linf",
    alpha: float | None = None,
    seed: int = 0,
) -> EffectivenessReport:
    """Relative loss gap of k-step PGD against a long-run oracle.

    faithful: independent PGD-k runs with step 1.5*eps/k; the oracle is one
      PGD-``oracle_steps`` best iterate. d_k may be positive.
    union: as faithful, but the oracle loss is the per-sample maximum over
      the oracle run and every k run, so d_k <= 0 always holds.
    trajectory: one fixed-step run (``alpha``, default 2.5*eps/100) of
      ``oracle_steps`` steps; L_k is its best-so-far loss after k steps.
    """
    if mode not in EFFECTIVENESS_MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {EFFECTIVENESS_MODES}")
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("attack_effectiveness needs at least one sample")
    k_list = tuple(int(k) for k in k_list)
    if not k_list or min(k_list) < 1:
        raise ValueError("k_list must hold positive step counts")
    if oracle_steps <= max(k_list):
        raise ValueError("oracle_steps must exceed every k")
    if seeds < 1:
        raise ValueError("seeds must be >= 1")
    all_k, all_o = [], []
    for s in range(seeds):
        run_seed = seed + 1000 * s
        if mode == "trajectory":
            step = alpha if alpha is not None else 2.5 * epsilon / 100
            spec = AttackSpec(norm=norm, epsilon=epsilon, steps=oracle_steps, step_size_rule="fixed", alpha=step, track="trace", seed=run_seed)
            best = np.maximum.accumulate(pgd(model, x, y, spec).loss_trace, axis=0)
            all_k.append(np.stack([best[k] for k in k_list]))
            all_o.append(best[oracle_steps])
            continue
        base = AttackSpec(norm=norm, epsilon=epsilon, step_size_rule="scaled", track="best")
        lk = np.stack([pgd(model, x, y, replace(base, steps=k, seed=run_seed + k)).adv_loss for k in k_list])
        lo = pgd(model, x, y, replace(base, steps=oracle_steps, seed=run_seed)).adv_loss
        if mode == "union":
            lo = np.maximum(lo, lk.max(axis=0))
        all_k.append(lk)
        all_o.append(lo)
    return EffectivenessReport(mode, k_list, oracle_steps, len(x), np.stack(all_k), np.stack(all_o))


# ------------------------------------------------------------- eps sweeps


@dataclass
class SweepCurve:
    eps: np.ndarray
    accuracy: np.ndarray
    spec: AttackSpec
    attack: str
    # broken[i]: samples counted as misclassified at eps[i]
    broken: np.ndarray = field(repr=False)

    def records(self) -> list[dict]:
        return [{"eps": float(e), "robust_accuracy": float(a)} for e, a in zip(self.eps, self.accuracy)]


def eps_sweep(
    model,
    x: np.ndarray,
    y: np.ndarray,
    eps_list: Sequence[float],
    spec: AttackSpec | None = None,
    attack: str = "pgd",
) -> SweepCurve:
    """Robust accuracy per budget with carry-forward.

    A sample broken at some eps stays broken at every larger eps (its
    perturbation is still feasible), and only unbroken samples are attacked.
    """
    eps = np.asarray(eps_list, dtype=np.float64)
    if eps.ndim != 1 or len(eps) == 0:
        raise ValueError("eps_list must be a nonempty sequence")
    if np.any(np.diff(eps) <= 0):
        raise ValueError("eps_list must be strictly ascending")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    spec = spec or AttackSpec(steps=20)
    broken = _logits(model, x).argmax(1) != y if len(x) else np.zeros(0, dtype=bool)
    rows, accs = [], []
    for e in eps:
        todo = np.flatnonzero(~broken)
        if e > 0 and len(todo):
            res = run_attack(attack, model, x[todo], y[todo], spec.with_eps(float(e)))
            fooled = _logits(model, x[todo] + res.delta).argmax(1) != y[todo]
            broken = broken.copy()
            broken[todo[fooled]] = True
        rows.append(broken.copy())
        accs.append(float((~broken).mean()) if len(x) else float("nan"))
    return SweepCurve(eps, np.array(accs), spec, attack, np.stack(rows) if rows else np.zeros((0, 0), bool))


# --------------------------------------------------- perturbation rendering


def scale_perturbation(delta: np.ndarray, epsilon: float, grayscale: bool = False) -> np.ndarray:
    """Map [-eps, eps] affinely onto [0, 1]; optional channel-mean grayscale."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    v = (np.asarray(delta, dtype=np.float64) + epsilon) / (2 * epsilon)
    if grayscale:
        v = v.mean(axis=-1, keepdims=True)
    return v


def unscale_perturbation(v: np.ndarray, epsilon: float) -> np.ndarray:
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    return 2 * epsilon * np.asarray(v, dtype=np.float64) - epsilon


def topk_accuracy(logits: np.ndarray, labels: np.ndarray, k: int = 1) -> float:
    logits = np.asarray(logits)
    if len(logits) == 0:
        return float("nan")
    k = min(k, logits.shape[1])
    # stable order: among equal logits the lower class index ranks first
    top = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float((top == np.asarray(labels)[:, None]).any(axis=1).mean())


def semantic_score(
    classifier: Callable[[np.ndarray], np.ndarray] | object,
    perturbations: np.ndarray,
    evaded_labels: np.ndarray,
    epsilon: float,
    topk: int = 5,
    grayscale: bool = False,
) -> float:
    """Top-k accuracy of ``classifier`` on rendered perturbations against the evaded labels."""
    images = scale_perturbation(perturbations, epsilon, grayscale)
    if hasattr(classifier, "predict"):
        logits = classifier.predict(images)
    else:
        logits = np.asarray(classifier(images))
    return topk_accuracy(logits, evaded_labels, topk)


# -------------------------------------------------- feature visualization


def _target_logit(logits: Tensor, target: np.ndarray) -> Tensor:
    # negated so that the targeted (loss-minimizing) attack raises the logit
    onehot = np.eye(logits.shape[1])[np.asarray(target)]
    return ad.neg(ad.tsum(ad.mul(logits, Tensor(onehot)), axis=1))


def feature_visualization(
    model,
    target_class: int,
    epsilon: float,
    steps: int,
    shape: tuple[int, ...] | None = None,
    norm: str = "l2",
    n: int = 1,
    seed: int = 0,
) -> np.ndarray:
    """Targeted PGD from a uniform random image toward a high target-class logit.

    Returns images of shape (n, H, W, C) in [0, 1]; ``steps=0`` returns the init.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    shape = tuple(shape or model.config.image_size)
    x0 = np.random.default_rng(seed).uniform(0, 1, size=(n,) + shape)
    if steps == 0:
        return x0
    target = np.full(n, target_class)
    spec = AttackSpec(norm=norm, epsilon=epsilon, steps=steps, init="zero", track="best", targeted=True, seed=seed)
    res = pgd(model, x0, target, spec, target=target, loss_fn=_target_logit)
    return np.clip(x0 + res.delta, 0.0, 1.0)


# ---------------------------------------------------- convergence traces


@dataclass
class ConvergenceTrace:
    loss: np.ndarray  # (steps + 1, N)
    best_so_far: np.ndarray
    check_step: int

    @property
    def saturated(self) -> np.ndarray:
        """Samples whose best loss did not improve after ``check_step``."""
        return self.best_so_far[-1] <= self.best_so_far[self.check_step]


def loss_trace_study(
    model,
    x: np.ndarray,
    y: np.ndarray,
    epsilon: float,
    steps: int = 500,
    alpha: float | None = None,
    check_step: int = 100,
    norm: str = "linf",
    seed: int = 0,
) -> ConvergenceTrace:
    """Long fixed-step PGD run (step 2.5*eps/100 by default) recording per-step loss."""
    if check_step > steps:
        raise ValueError("check_step must not exceed steps")
    step = alpha if alpha is not None else 2.5 * epsilon / 100
    spec = AttackSpec(norm=norm, epsilon=epsilon, steps=steps, step_size_rule="fixed", alpha=step, track="trace", seed=seed)
    trace = pgd(model, x, y, spec).loss_trace
    return ConvergenceTrace(trace, np.maximum.accumulate(trace, axis=0), check_step)


__all__ = [
    "ConvergenceTrace",
    "EffectivenessReport",
    "SweepCurve",
    "attack_effectiveness",
    "effectiveness",
    "eps_sweep",
    "feature_visualization",
    "loss_trace_study",
    "scale_perturbation",
    "semantic_score",
    "topk_accuracy",
    "unscale_perturbation",
]
