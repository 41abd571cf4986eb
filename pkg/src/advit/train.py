"""Adversarial training: eps warm-up, AdamW, cosine schedule, FGSM inner attack, TRADES."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .attacks import AttackSpec, fgsm, pgd, project
from .augment import AugPolicy, LabeledBatch, compose_policy
from .autodiff import Tensor
from .data import Dataset
from .vit import ConfigError, Model, ModelConfig

log = logging.getLogger(__name__)

LABEL_LEAK_EPS = 8 / 255
REFERENCE_LR = 5e-4
REFERENCE_BATCH = 512


@dataclass(frozen=True)
class TrainRecipe:
    epochs: int = 30
    eps_max: float = 4 / 255
    eps_warmup_epochs: int = 10
    attack: str = "fgsm"
    # None: 1-step FGSM, or 2 steps once eps_max >= 8/255
    attack_steps: int | None = None
    policy: AugPolicy = field(default_factory=AugPolicy)
    weight_decay: float = 0.5
    # None: 0.0005 * batch_size / 512
    base_lr: float | None = None
    batch_size: int = 512
    lr_warmup_epochs: int = 10
    lr_warmup_start: float = 5e-6
    lr_cooldown_epochs: int = 10
    lr_final: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss_mode: str = "plain"
    trades_beta: float = 6.0
    trades_steps: int = 10
    grad_clip: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if not 0 <= self.eps_warmup_epochs <= self.epochs:
            raise ValueError("eps_warmup_epochs must be in [0, epochs]")
        if self.eps_max < 0:
            raise ValueError("eps_max must be nonnegative")
        if self.lr_warmup_epochs < 0 or self.lr_cooldown_epochs < 0:
            raise ValueError("lr warm-up and cool-down must be nonnegative")
        if self.lr_warmup_epochs + self.lr_cooldown_epochs > self.epochs:
            raise ValueError("lr warm-up plus cool-down exceeds epochs")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.loss_mode not in ("plain", "trades"):
            raise ValueError(f"unknown loss mode {self.loss_mode!r}")
        if self.attack not in ("fgsm", "pgd"):
            raise ValueError(f"unknown training attack {self.attack!r}")
        if self.trades_beta < 0 or self.trades_steps < 1:
            raise ValueError("TRADES needs beta >= 0 and steps >= 1")

    @property
    def lr(self) -> float:
        if self.base_lr is not None:
            return self.base_lr
        return scaled_lr(self.batch_size)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainRecipe":
        d = dict(d)
        if isinstance(d.get("policy"), dict):
            d["policy"] = AugPolicy.from_dict(d["policy"])
        return cls(**d)


def scaled_lr(batch_size: int) -> float:
    return REFERENCE_LR * batch_size / REFERENCE_BATCH


# --------------------------------------------------------------- schedules


def eps_schedule(epoch: int, warmup_epochs: int, eps_max: float) -> float:
    """Linear warm-up: eps_max * min(1, (epoch + 1) / W), full budget when W = 0."""
    if warmup_epochs < 0:
        raise ValueError("warmup_epochs must be nonnegative")
    if warmup_epochs == 0:
        return eps_max
    if epoch + 1 >= warmup_epochs:
        return eps_max
    return eps_max * (epoch + 1) / warmup_epochs


def lr_schedule(epoch: float, recipe: TrainRecipe) -> float:
    """Linear warm-up, cosine decay to ``lr_final``, then constant cool-down.

    ``epoch`` may be fractional; the three pieces meet continuously.
    """
    base, W, C = recipe.lr, recipe.lr_warmup_epochs, recipe.lr_cooldown_epochs
    if W > 0 and epoch < W:
        return recipe.lr_warmup_start + (base - recipe.lr_warmup_start) * epoch / W
    decay_end = recipe.epochs - C
    if epoch >= decay_end:
        return recipe.lr_final
    span = decay_end - W
    t = (epoch - W) / span
    return recipe.lr_final + 0.5 * (base - recipe.lr_final) * (1 + math.cos(math.pi * t))


# --------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class OptimizerError(FloatingPointError):
    pass


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    weight_decay: float,
    decay: Callable[[str], bool] | None = None,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One AdamW update; the decay term never enters the moment estimates.

    ``decay(name)`` selects which parameters are decayed (all by default).
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise OptimizerError(f"non-finite gradient for parameter {name!r}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        update = m_hat / (np.sqrt(v_hat) + state.eps)
        wd = weight_decay if (decay is None or decay(name)) else 0.0
        new_params[name] = p - lr * (update + wd * p)
        m_new[name], v_new[name] = m, v
    return new_params, OptimizerState(m_new, v_new, t, b1, b2, state.eps)


def default_decay(name: str) -> bool:
    """Skip biases, norm scales, LayerScale, temperatures, tokens and positional tables."""
    leaf = name.rsplit(".", 1)[-1]
    if leaf in ("bias", "log_temperature", "conv1_bias", "conv2_bias") or leaf.startswith("gamma"):
        return False
    if name in ("cls_token", "pos_embed") or ".norm" in f".{name}" and leaf == "weight":
        return False
    return True


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total <= max_norm or total == 0:
        return grads
    return {k: g * (max_norm / total) for k, g in grads.items()}


# ------------------------------------------------------------------ losses


def soft_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    return ad.mean(ad.cross_entropy(logits, targets))


def kl_divergence(p_logits: Tensor, q_logits: Tensor) -> Tensor:
    """Per-sample KL(softmax(p) || softmax(q))."""
    lp = ad.log_softmax(p_logits, -1)
    lq = ad.log_softmax(q_logits, -1)
    return ad.tsum(ad.mul(ad.softmax(p_logits, -1), lp - lq), axis=-1)


def trades_loss(
    model: Model,
    x: np.ndarray,
    y,
    epsilon: float,
    steps: int = 10,
    beta: float = 6.0,
    seed: int = 0,
    leaves: Mapping[str, Tensor] | None = None,
) -> Tensor:
    """Clean cross-entropy + beta * KL(p(x) || p(x_adv)).

    ``x_adv`` maximizes the KL term with ``steps`` linf sign steps of size
    2 * eps / steps from x + 0.001 * N(0, 1), projected after every step.
    Gradients flow into ``leaves`` through both terms.
    """
    if beta < 0 or steps < 1:
        raise ValueError("TRADES needs beta >= 0 and steps >= 1")
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    clean_const = model(Tensor(x))
    delta = project(0.001 * rng.normal(size=x.shape), x, "linf", epsilon)
    alpha = 2.0 * epsilon / steps
    p_const = Tensor(clean_const.data)
    for _ in range(steps):
        xt = Tensor(x + delta, requires_grad=True)
        kl = ad.tsum(kl_divergence(p_const, model(xt)))
        kl.backward()
        delta = project(delta + alpha * np.sign(xt.grad), x, "linf", epsilon)
    clean = model(Tensor(x), leaves)
    adv = model(Tensor(x + delta), leaves)
    ce = soft_cross_entropy(clean, y)
    return ce + ad.scale(ad.mean(kl_divergence(clean, adv)), beta)


# ---------------------------------------------------------------- training


def inner_attack_spec(recipe: TrainRecipe, epsilon: float, seed: int) -> AttackSpec:
    steps = recipe.attack_steps
    if steps is None:
        steps = 2 if recipe.eps_max >= LABEL_LEAK_EPS else 1
    if recipe.attack == "fgsm":
        return AttackSpec(norm="linf", epsilon=epsilon, steps=steps, step_size_rule="fgsm", init="uniform", track="final", seed=seed)
    return AttackSpec(norm="linf", epsilon=epsilon, steps=steps, step_size_rule="scaled", init="uniform", track="final", seed=seed)


def _stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    clean_acc: float
    fgsm_acc: float
    eps: float
    lr: float

    def to_dict(self) -> dict:
        return asdict(self)


TrainHistory = list[EpochRecord]


def adversarial_train_epoch(
    model: Model,
    data: Dataset,
    recipe: TrainRecipe,
    epoch: int,
    state: OptimizerState,
    pipeline=None,
    decay: Callable[[str], bool] | None = default_decay,
) -> tuple[dict[str, np.ndarray], OptimizerState, dict]:
    """One pass over ``data``: augment, attack at eps_e, update with AdamW.

    Returns the new parameters (``model.params`` is updated as well), the
    optimizer state and epoch aggregates.
    """
    pipeline = pipeline or compose_policy(recipe.policy)
    eps = eps_schedule(epoch, recipe.eps_warmup_epochs, recipe.eps_max)
    lr = lr_schedule(epoch, recipe)
    order_rng = _stream(recipe.seed, epoch, 0)
    losses = []
    for b, (xb, yb) in enumerate(data.batches(recipe.batch_size, order_rng)):
        try:
            aug_rng = _stream(recipe.seed, epoch, 1, b)
            batch = pipeline(LabeledBatch.from_ints(xb, yb, data.num_classes), aug_rng)
            attack_seed = int(_stream(recipe.seed, epoch, 2, b).integers(2**31))
            leaves = model.leaves()
            if recipe.loss_mode == "trades":
                loss = trades_loss(model, batch.images, batch.labels, eps, recipe.trades_steps, recipe.trades_beta, attack_seed, leaves)
            else:
                x_adv = batch.images
                if eps > 0:
                    spec = inner_attack_spec(recipe, eps, attack_seed)
                    attack = fgsm if recipe.attack == "fgsm" else pgd
                    x_adv = batch.images + attack(model, batch.images, batch.labels, spec).delta
                loss = soft_cross_entropy(model(Tensor(x_adv), leaves), batch.labels)
            loss.backward()
            grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
            if recipe.grad_clip is not None:
                grads = clip_grads(grads, recipe.grad_clip)
            model.params, state = adamw_step(model.params, grads, state, lr, recipe.weight_decay, decay)
        except Exception as exc:
            raise RuntimeError(f"epoch {epoch}, batch {b}: {exc}") from exc
        losses.append(float(loss.data))
    return model.params, state, {"train_loss": float(np.mean(losses)) if losses else float("nan"), "eps": eps, "lr": lr}


def fgsm_accuracy(model: Model, data: Dataset, epsilon: float, seed: int = 0, batch_size: int = 256) -> float:
    """Accuracy under 1-step FGSM with a fixed seed (comparable across epochs)."""
    if len(data) == 0:
        return float("nan")
    correct = 0
    for i, (xb, yb) in enumerate(data.batches(batch_size)):
        spec = AttackSpec(norm="linf", epsilon=epsilon, steps=1, step_size_rule="fgsm", init="uniform", track="final", seed=seed + i)
        res = fgsm(model, xb, yb, spec)
        correct += int((~res.success).sum())
    return correct / len(data)


def early_stop_select(history: TrainHistory | list[float]) -> int:
    """Epoch index with the highest FGSM accuracy; the earliest wins ties."""
    if len(history) == 0:
        raise ValueError("empty training history")
    accs = [h.fgsm_acc if isinstance(h, EpochRecord) else float(h) for h in history]
    return int(np.argmax(accs))


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    best_params: dict[str, np.ndarray]
    best_epoch: int
    history: TrainHistory
    state: OptimizerState


def train(
    model: Model,
    recipe: TrainRecipe,
    train_data: Dataset,
    val_data: Dataset | None = None,
    state: OptimizerState | None = None,
    on_epoch: Callable[[EpochRecord, Model], None] | None = None,
) -> TrainResult:
    """Run ``recipe.epochs`` epochs, keeping the checkpoint with the best FGSM validation accuracy."""
    state = state or OptimizerState(beta1=recipe.beta1, beta2=recipe.beta2, eps=recipe.adam_eps)
    pipeline = compose_policy(
        recipe.policy,
        dataset_mean=train_data.images.mean(axis=(0, 1, 2)) if len(train_data) else 0.5,
        dataset_std=train_data.images.std(axis=(0, 1, 2)) if len(train_data) else 0.25,
    )
    history: TrainHistory = []
    best_params, best_acc = dict(model.params), -np.inf
    val = val_data if val_data is not None else train_data
    for epoch in range(recipe.epochs):
        _, state, stats = adversarial_train_epoch(model, train_data, recipe, epoch, state, pipeline)
        rec = EpochRecord(
            epoch=epoch,
            train_loss=stats["train_loss"],
            clean_acc=model.accuracy(val.images, val.labels),
            fgsm_acc=fgsm_accuracy(model, val, recipe.eps_max, seed=recipe.seed),
            eps=stats["eps"],
            lr=stats["lr"],
        )
        history.append(rec)
        if rec.fgsm_acc > best_acc:
            best_acc, best_params = rec.fgsm_acc, dict(model.params)
        log.info("epoch %d loss %.4f clean %.3f fgsm %.3f eps %.4f lr %.2e", epoch, rec.train_loss, rec.clean_acc, rec.fgsm_acc, rec.eps, rec.lr)
        if on_epoch is not None:
            on_epoch(rec, model)
    return TrainResult(dict(model.params), best_params, early_stop_select(history), history, state)


def adapt_low_res(config: ModelConfig, image_size: tuple[int, int, int] | None = None) -> ModelConfig:
    """Set the first two stride-2 stem convolutions to stride 1; weights keep their shapes."""
    if config.patch_embed != "conv":
        raise ConfigError("adapt_low_res needs a convolutional patch embedding")
    if config.pos_encoding == "learned":
        raise ConfigError("learned positional tables depend on the token count; use sinusoidal encoding")
    strides = list(config.conv_strides)
    twos = [i for i, s in enumerate(strides) if s == 2]
    if len(twos) < 2:
        raise ConfigError("adapt_low_res needs at least two stride-2 convolutions")
    for i in twos[:2]:
        strides[i] = 1
    return replace(config, conv_strides=tuple(strides), image_size=tuple(image_size or config.image_size))
