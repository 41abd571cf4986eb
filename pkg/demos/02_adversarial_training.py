# %% [markdown]
# Adversarial training on a separable toy problem
#
# The two classes live in disjoint pixel bands, so a robust classifier exists
# for any l_inf budget below half the margin. FGSM training with a warmed-up
# budget should find one.

# %%
import numpy as np

from advit.attacks import AttackSpec, robust_accuracy
from advit.augment import LOW_RES_BASIC, light_policy
from advit.data import linf_class_margin, make_margin_blobs
from advit.train import TrainRecipe, train
from advit.vit import Model, tiny_config

train_ds = make_margin_blobs(512, seed=0)
test_ds = make_margin_blobs(256, seed=1)
print("half margin:", linf_class_margin(train_ds) / 2)

# %%
recipe = TrainRecipe(
    epochs=12,
    eps_max=0.1,
    eps_warmup_epochs=5,
    batch_size=64,
    base_lr=3e-3,
    lr_warmup_epochs=2,
    lr_cooldown_epochs=2,
    lr_warmup_start=1e-4,
    lr_final=1e-4,
    policy=light_policy(basic=LOW_RES_BASIC),
)
model = Model(tiny_config("xcit"), seed=0)
result = train(model, recipe, *train_ds.split(448))
for rec in result.history:
    print(f"epoch {rec.epoch:2d}  eps {rec.eps:.3f}  lr {rec.lr:.2e}  loss {rec.train_loss:.3f}  fgsm-val {rec.fgsm_acc:.3f}")

# %%
best = Model(model.config, params=result.best_params)
x, y = test_ds.images, test_ds.labels
print("clean ", robust_accuracy(best, x, y, AttackSpec(epsilon=0.0, steps=1)))
print("pgd-20", robust_accuracy(best, x, y, AttackSpec(epsilon=0.1, steps=20)))
