# %% [markdown]
# # Density ratio on a circle
#
# Contexts and targets live on the unit circle. The target given context theta
# is a mixture of two von Mises modes with weights 0.7 and 0.3. Query and key
# Siren networks trained with InfoNCE recover the conditional through a softmax
# over a uniform grid of targets.

# %%
import time

import numpy as np

from surfdist.toy import ToyConfig, total_variation, train_toy, true_conditional

cfg = ToyConfig(steps=2000)
t0 = time.perf_counter()
models, trace = train_toy(cfg)
print(f"{cfg.steps} steps in {time.perf_counter() - t0:.0f}s, final loss {np.mean(trace[-100:]):.3f}")

# %%
grid = np.linspace(0, 2 * np.pi, 12, endpoint=False)
learned = models.conditional(np.array([1.0]), grid)[0] * len(grid) / (2 * np.pi)
print("target   learned  true")
for c, p in zip(grid, learned):
    print(f"{c:6.2f}  {p:7.3f}  {true_conditional(c, 1.0, cfg):6.3f}")

# %%
tv = total_variation(models, cfg)
print(f"total variation over {len(tv)} contexts: mean {tv.mean():.3f}, max {tv.max():.3f}")
