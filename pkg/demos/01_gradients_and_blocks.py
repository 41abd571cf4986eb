# %% [markdown]
# Gradient checks on the three block families
#
# Every layer is a small numpy op with a hand-written backward pass. Before
# trusting any attack built on top, compare the tape against central
# differences on a tiny model.

# %%
import numpy as np

from advit import autodiff as ad
from advit.autodiff import Tensor
from advit.vit import Model, tiny_config

rng = np.random.default_rng(0)
x = rng.uniform(size=(2, 8, 8, 3))
y = np.array([0, 1])

# %%
# a wider init than the 0.02 default keeps deep-path gradients well above
# the rounding floor of the check
for kind in ("vit", "cait", "xcit"):
    model = Model(tiny_config(kind, init_std=0.2), seed=0)
    err = ad.finite_diff_check(lambda t: ad.mean(ad.cross_entropy(model(t), y)), x)
    print(f"{kind:5s} params={sum(v.size for v in model.params.values()):6d}  input-grad rel err {err:.2e}")

# %% [markdown]
# XCA attends over channels, so its cost grows linearly with token count.
# Doubling the image side quadruples tokens but the attention map stays d_h x d_h.

# %%
model = Model(tiny_config("xcit", image_size=(16, 16, 3)), seed=0)
print(model(Tensor(rng.uniform(size=(1, 16, 16, 3)))).data.shape)
