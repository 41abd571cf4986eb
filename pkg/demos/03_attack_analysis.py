# %% [markdown]
# How strong are cheap attacks?
#
# Sweep the budget with carry-forward (a broken sample stays broken), then
# ask how much loss a k-step PGD leaves on the table against a long run.

# %%
import numpy as np

from advit.analysis import attack_effectiveness, eps_sweep, scale_perturbation
from advit.attacks import AttackSpec, pgd
from advit.augment import LOW_RES_BASIC, light_policy
from advit.data import make_margin_blobs
from advit.train import TrainRecipe, train
from advit.vit import Model, tiny_config

ds = make_margin_blobs(64, seed=3)
model = Model(tiny_config("vit"), seed=1)
# a few clean epochs: accurate, but not robust
recipe = TrainRecipe(epochs=10, eps_max=0.0, eps_warmup_epochs=0, batch_size=64, base_lr=3e-3,
                     lr_warmup_epochs=2, lr_cooldown_epochs=2, lr_warmup_start=1e-4, lr_final=1e-4, policy=light_policy(basic=LOW_RES_BASIC))
train(model, recipe, make_margin_blobs(256, seed=0))

# %%
curve = eps_sweep(model, ds.images, ds.labels, [0.0, 0.02, 0.05, 0.1, 0.2], AttackSpec(steps=10))
for r in curve.records():
    print(f"eps {r['eps']:.2f}  acc {r['robust_accuracy']:.3f}")

# %%
rep = attack_effectiveness(model, ds.images[:16], ds.labels[:16], 0.05, k_list=(1, 2, 5, 10), oracle_steps=100, seeds=2)
for r in rep.records():
    print(f"k={r['k']:2d}  mean gap {r['d_mean']:+.4f}  [{r['ci_low']:+.4f}, {r['ci_high']:+.4f}]")

# %% [markdown]
# Perturbations rendered so that -eps is black, +eps white.

# %%
res = pgd(model, ds.images[:4], ds.labels[:4], AttackSpec(epsilon=0.05, steps=10))
img = scale_perturbation(res.delta, 0.05)
print(img.shape, img.min(), img.max())
