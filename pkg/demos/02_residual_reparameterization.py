# %% [markdown]
# # Residual reparameterization of a soft prompt
#
# A soft prompt is a matrix P of n virtual-token embeddings. Instead of
# training P directly, each row goes through a bottleneck MLP with a skip
# connection:
#
#     P' = LayerNorm(relu(P W_down) W_up) + P
#
# After training the network is applied once and thrown away ("baking"), so
# inference costs exactly as much as plain prompt tuning.

# %%
import numpy as np

from rptlab import ReparamNet, ReparamSpec, apply_reparam, bake, count_params, init_prompt
from rptlab.tensor import Parameter

d, n, m = 16, 4, 8
E = np.random.default_rng(0).normal(size=(64, d))      # stand-in embedding table
bank = init_prompt("sampled-vocab", n, E, seed=1)
spec = ReparamSpec(kind="residual-mlp", m=m)
net = ReparamNet(spec, d, n, seed=1)
P_prime = apply_reparam(spec, net, bank.P)
print("P  row 0:", np.round(bank.P.data[0, :5], 3))
print("P' row 0:", np.round(P_prime.data[0, :5], 3))

# %% [markdown]
# With the up-projection and the layer-norm shift at zero the branch
# contributes nothing and the skip connection hands P through untouched.

# %%
net.p("W_up").data[:] = 0.0
net.p("ln.b").data[:] = 0.0
print("identity when the branch is dead:", np.array_equal(apply_reparam(spec, net, bank.P).data, bank.P.data))

# %% [markdown]
# Parameter counts follow 2dm + 2d for the shared network plus dn for the
# prompt itself. At the base model size (d=768, m=250, n=100):

# %%
for kind, shared in [("identity", True), ("residual-mlp", True), ("residual-mlp", False)]:
    total, frozen = count_params(ReparamSpec(kind=kind, m=250, shared=shared), 768, 100)
    print(f"{kind:13s} shared={shared!s:5s} trainable={total:>10,d}")

# %% [markdown]
# Baking stores P' as a plain matrix. The baked bank carries no network.

# %%
net = ReparamNet(spec, d, n, seed=2)
baked = bake(spec, net, bank)
print("baked:", baked.baked, "max |P' - baked| =", np.abs(apply_reparam(spec, net, bank.P).data - baked.P.data).max())
