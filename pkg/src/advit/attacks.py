"""Gradient attacks: FGSM with random start, PGD (linf / l2) and a simplified APGD-CE.

A model is any callable mapping a (B, ...) Tensor of inputs to (B, K) logits.
Attacks work per sample: losses, best iterates and step sizes are tracked
for each row of the batch independently.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LossFn = Callable[[Tensor, np.ndarray], Tensor]
FGSM_INIT_OFFSET = 1e-5


@dataclass(frozen=True)
class AttackSpec:
    norm: str = "linf"
    epsilon: float = 4 / 255
    steps: int = 10
    # "scaled": 1.5 * eps / steps; "fixed": alpha; "fgsm": eps per step
    step_size_rule: str = "scaled"
    alpha: float | None = None
    init: str = "uniform"
    # "final", "best" or "trace"
    track: str = "best"
    targeted: bool = False
    restarts: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.norm not in ("linf", "l2"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size_rule not in ("scaled", "fixed", "fgsm"):
            raise ValueError(f"unknown step size rule {self.step_size_rule!r}")
        if self.step_size_rule == "fixed" and (self.alpha is None or self.alpha < 0):
            raise ValueError("fixed step size rule needs alpha >= 0")
        if self.init not in ("zero", "uniform"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.track not in ("final", "best", "trace"):
            raise ValueError(f"unknown track mode {self.track!r}")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")

    @property
    def step_size(self) -> float:
        if self.step_size_rule == "scaled":
            return 1.5 * self.epsilon / self.steps
        if self.step_size_rule == "fgsm":
            return self.epsilon
        return float(self.alpha)

    def with_eps(self, epsilon: float) -> "AttackSpec":
        return replace(self, epsilon=epsilon)


@dataclass
class AttackResult:
    delta: np.ndarray
    adv_loss: np.ndarray
    success: np.ndarray
    loss_trace: np.ndarray | None = None
    iterates: list[np.ndarray] | None = field(default=None, repr=False)

    @property
    def x_adv_offset(self) -> np.ndarray:
        return self.delta


def _flat_norm(v: np.ndarray) -> np.ndarray:
    return np.sqrt((v.reshape(len(v), -1) ** 2).sum(axis=1)).reshape((-1,) + (1,) * (v.ndim - 1))


def project(delta: np.ndarray, x: np.ndarray, norm: str, epsilon: float) -> np.ndarray:
    """Project onto the eps-ball (per sample), then onto the [0, 1] box around x."""
    delta = np.asarray(delta, dtype=np.float64)
    if norm == "linf":
        delta = np.clip(delta, -epsilon, epsilon)
    elif norm == "l2":
        n = _flat_norm(delta)
        factor = np.where(n > epsilon, epsilon / np.where(n > 0, n, 1.0), 1.0)
        delta = delta * factor
    else:
        raise ValueError(f"unknown norm {norm!r}")
    # recompute only clipped coordinates so interior entries stay bit-exact
    adv = x + delta
    return np.where(adv > 1.0, 1.0 - x, np.where(adv < 0.0, -x, delta))


def per_sample_ce(logits: Tensor, y: np.ndarray) -> Tensor:
    return ad.cross_entropy(logits, y)


def _objective(model, x_adv: np.ndarray, y, loss_fn: LossFn, targeted: bool):
    """Per-sample objective to maximize and its input gradient."""
    xt = Tensor(x_adv, requires_grad=True)
    logits = model(xt)
    loss = loss_fn(logits, y)
    if targeted:
        loss = ad.neg(loss)
    loss.backward(np.ones(loss.shape))
    g = xt.grad if xt.grad is not None else np.zeros_like(x_adv)
    if not np.isfinite(g).all():
        raise ad.NonFiniteError("attack gradient", -1)
    return loss.data.copy(), g, logits.data


def _direction(g: np.ndarray, norm: str) -> np.ndarray:
    if norm == "linf":
        return np.sign(g)
    n = _flat_norm(g)
    # zero gradient leaves the iterate unchanged
    return np.where(n > 0, g / np.where(n > 0, n, 1.0), 0.0)


def _init_delta(x: np.ndarray, spec: AttackSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.init == "zero" or spec.epsilon == 0:
        return np.zeros_like(x)
    if spec.norm == "linf":
        d = rng.uniform(-spec.epsilon, spec.epsilon, size=x.shape)
    else:
        d = rng.normal(size=x.shape)
        d = d / np.maximum(_flat_norm(d), 1e-12)
        r = rng.uniform(0, 1, size=(len(x),) + (1,) * (x.ndim - 1)) ** (1.0 / max(1, x[0].size))
        d = d * r * spec.epsilon
    return project(d, x, spec.norm, spec.epsilon)


def _misclassified(logits: np.ndarray, y, targeted: bool, target=None) -> np.ndarray:
    pred = logits.argmax(axis=1)
    if targeted:
        return pred == np.asarray(target)
    labels = np.asarray(y)
    if labels.ndim == 2:
        labels = labels.argmax(axis=1)
    return pred != labels


def _loss_labels(y, spec: AttackSpec, target):
    if spec.targeted:
        if target is None:
            raise ValueError("targeted attack needs target labels")
        return np.asarray(target)
    return y


def fgsm(model, x: np.ndarray, y, spec: AttackSpec, target=None, loss_fn: LossFn = per_sample_ce) -> AttackResult:
    """FGSM with uniform random start plus a 1e-5 offset; ``steps`` may be 1 or 2.

    Each step is a sign step of size eps (or ``spec.alpha`` under the "fixed"
    rule) followed by projection.
    """
    if spec.steps not in (1, 2):
        raise ValueError("fgsm supports 1 or 2 steps")
    if spec.norm != "linf":
        raise ValueError("fgsm is defined for the linf threat model")
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(spec.seed)
    labels = _loss_labels(y, spec, target)
    if spec.init == "uniform":
        delta = rng.uniform(-spec.epsilon, spec.epsilon, size=x.shape) + FGSM_INIT_OFFSET
    else:
        delta = np.zeros_like(x)
    delta = project(delta, x, "linf", spec.epsilon)
    alpha = spec.alpha if spec.step_size_rule == "fixed" else spec.epsilon
    trace = []
    iterates = [delta.copy()] if spec.track == "trace" else None
    for _ in range(spec.steps):
        loss, g, _ = _objective(model, x + delta, labels, loss_fn, spec.targeted)
        trace.append(loss)
        delta = project(delta + alpha * np.sign(g), x, "linf", spec.epsilon)
        if iterates is not None:
            iterates.append(delta.copy())
    loss, _, logits = _objective(model, x + delta, labels, loss_fn, spec.targeted)
    trace.append(loss)
    return AttackResult(
        delta=delta,
        adv_loss=loss,
        success=_misclassified(logits, y, spec.targeted, target),
        loss_trace=np.array(trace) if spec.track == "trace" else None,
        iterates=iterates,
    )


def _pgd_run(model, x, y, labels, spec, rng, loss_fn, target):
    delta = _init_delta(x, spec, rng)
    alpha = spec.step_size
    loss, g, logits = _objective(model, x + delta, labels, loss_fn, spec.targeted)
    best_loss, best_delta, best_logits = loss.copy(), delta.copy(), logits.copy()
    trace = [loss]
    iterates = [delta.copy()] if spec.track == "trace" else None
    for _ in range(spec.steps):
        delta = project(delta + alpha * _direction(g, spec.norm), x, spec.norm, spec.epsilon)
        loss, g, logits = _objective(model, x + delta, labels, loss_fn, spec.targeted)
        trace.append(loss)
        if iterates is not None:
            iterates.append(delta.copy())
        better = loss > best_loss
        best_loss = np.where(better, loss, best_loss)
        best_delta[better] = delta[better]
        best_logits[better] = logits[better]
    if spec.track == "final":
        best_loss, best_delta, best_logits = loss, delta, logits
    return best_delta, best_loss, best_logits, np.array(trace), iterates


def pgd(model, x: np.ndarray, y, spec: AttackSpec, target=None, loss_fn: LossFn = per_sample_ce) -> AttackResult:
    """Projected gradient ascent; sign steps for linf, normalized steps for l2.

    With ``track="best"`` (or "trace") the returned perturbation is the
    highest-loss iterate visited, the initial point included. Restarts keep
    the per-sample best across runs.
    """
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(spec.seed)
    labels = _loss_labels(y, spec, target)
    result = None
    for _ in range(spec.restarts):
        delta, loss, logits, trace, iterates = _pgd_run(model, x, y, labels, spec, rng, loss_fn, target)
        if result is None:
            result = AttackResult(
                delta, loss, _misclassified(logits, y, spec.targeted, target),
                trace if spec.track == "trace" else None, iterates,
            )
            continue
        better = loss > result.adv_loss
        result.delta[better] = delta[better]
        result.adv_loss = np.where(better, loss, result.adv_loss)
        result.success = np.where(better, _misclassified(logits, y, spec.targeted, target), result.success)
    return result


def apgd_checkpoints(steps: int) -> list[int]:
    """Iterations at which the step size is reconsidered: 0.22*n, then geometric-ish gaps."""
    p = [0.0, 0.22]
    while p[-1] < 1:
        p.append(p[-1] + max(p[-1] - p[-2] - 0.03, 0.06))
    return sorted({int(np.ceil(q * steps)) for q in p[1:] if q <= 1} - {0})


def apgd_ce(
    model,
    x: np.ndarray,
    y,
    spec: AttackSpec,
    momentum: float = 0.25,
    rho: float = 0.75,
    target=None,
    loss_fn: LossFn = per_sample_ce,
) -> AttackResult:
    """Simplified APGD on cross-entropy.

    Steps are ``x + (1 - momentum) * (z - x) + momentum * (x - x_prev)`` with
    ``z`` a projected gradient step. At each checkpoint the step size halves
    for samples whose fraction of loss-increasing steps fell below ``rho``
    (or whose best loss stalled since an unreduced checkpoint), and those
    samples restart from their best iterate. ``rho=0`` disables halving.
    The initial step size is 2*eps unless the spec fixes ``alpha``.
    """
    if spec.steps < 2:
        raise ValueError("apgd_ce needs at least 2 steps")
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(spec.seed)
    labels = _loss_labels(y, spec, target)
    B = len(x)
    bshape = (B,) + (1,) * (x.ndim - 1)
    eta = np.full(bshape, spec.alpha if spec.step_size_rule == "fixed" else 2.0 * spec.epsilon)
    delta = _init_delta(x, spec, rng)
    loss, g, logits = _objective(model, x + delta, labels, loss_fn, spec.targeted)
    best_loss, best_delta, best_logits = loss.copy(), delta.copy(), logits.copy()
    best_grad = g.copy()
    trace = [loss]
    iterates = [delta.copy()] if spec.track == "trace" else None
    checkpoints = set(apgd_checkpoints(spec.steps))
    last_check = 0
    increases = np.zeros(B)
    reduced_last = np.ones(B, dtype=bool)
    best_at_last_check = best_loss.copy()
    prev_delta = delta.copy()
    prev_loss = loss.copy()
    for i in range(1, spec.steps + 1):
        z = project(delta + eta * _direction(g, spec.norm), x, spec.norm, spec.epsilon)
        if i == 1 or momentum == 0:
            new = z
        else:
            new = project(delta + (1 - momentum) * (z - delta) + momentum * (delta - prev_delta), x, spec.norm, spec.epsilon)
        prev_delta, delta = delta, new
        loss, g, logits = _objective(model, x + delta, labels, loss_fn, spec.targeted)
        trace.append(loss)
        if iterates is not None:
            iterates.append(delta.copy())
        increases += loss > prev_loss
        prev_loss = loss
        better = loss > best_loss
        best_loss = np.where(better, loss, best_loss)
        best_delta[better] = delta[better]
        best_logits[better] = logits[better]
        best_grad[better] = g[better]
        if i in checkpoints and rho > 0:
            window = i - last_check
            osc = increases < rho * window
            stalled = (~reduced_last) & (best_at_last_check >= best_loss)
            halve = osc | stalled
            reduced_last = halve
            best_at_last_check = best_loss.copy()
            increases[:] = 0
            last_check = i
            if halve.any():
                eta[halve] /= 2.0
                delta[halve] = best_delta[halve]
                prev_delta[halve] = best_delta[halve]
                g[halve] = best_grad[halve]
    if spec.track == "final":
        best_loss, best_delta, best_logits = loss, delta, logits
    return AttackResult(
        delta=best_delta,
        adv_loss=best_loss,
        success=_misclassified(best_logits, y, spec.targeted, target),
        loss_trace=np.array(trace) if spec.track == "trace" else None,
        iterates=iterates,
    )


ATTACKS = {"fgsm": fgsm, "pgd": pgd, "apgd-ce": apgd_ce}


def run_attack(name: str, model, x, y, spec: AttackSpec, **kwargs) -> AttackResult:
    try:
        fn = ATTACKS[name]
    except KeyError:
        raise ValueError(f"unknown attack {name!r}; choose from {sorted(ATTACKS)}") from None
    return fn(model, x, y, spec, **kwargs)


def robust_accuracy(model, x, y, spec: AttackSpec, attack: str = "pgd", batch_size: int = 256) -> float:
    """Fraction of samples classified correctly both clean and under attack."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if len(x) == 0:
        return float("nan")
    correct = 0
    for i in range(0, len(x), batch_size):
        xb, yb = x[i : i + batch_size], y[i : i + batch_size]
        clean = model(Tensor(xb)).data.argmax(1) == yb
        res = run_attack(attack, model, xb, yb, spec)
        adv = model(Tensor(xb + res.delta)).data.argmax(1) == yb
        correct += int((clean & adv).sum())
    return correct / len(x)
