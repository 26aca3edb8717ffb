#!/usr/bin/env python3
"""How far a freshly initialised block is from the identity map."""

# %%
import numpy as np

from rtivae import blocks
from rtivae.diffcore import Tensor


def rel_dev(out, x):
    return np.linalg.norm(out - x) / np.linalg.norm(x)


# %% [markdown]
# With the attention and feed-forward weights zeroed, a post-norm block
# still applies layer norm, while the reordered block passes x through
# two GRU-style gates. A gate with bias b_g leaks sigmoid(-b_g) of the
# branch, so two gates leave (1 - sigmoid(-b_g))**2 of x.

# %%
rng = np.random.default_rng(0)
x = rng.normal(size=(8, 32))
for b_g in (2.0, 5.0, 6.0, 8.0):
    p = blocks.zero_branches(blocks.init_block(rng, "r", 32, 128, "reordered", gate_bias=b_g))
    out = blocks.reordered_block(Tensor(x), p, "r", 4).data
    closed = 1 - (1 - 1 / (1 + np.exp(b_g))) ** 2
    print(f"b_g={b_g}: deviation {rel_dev(out, x):.4f}, closed form {closed:.4f}")

# %%
v = blocks.zero_branches(blocks.init_block(rng, "v", 32, 128, "vanilla"))
print("vanilla deviation", rel_dev(blocks.vanilla_block(Tensor(x), v, "v", 4).data, x))
