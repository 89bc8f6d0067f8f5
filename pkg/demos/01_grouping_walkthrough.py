"""Walk through one grouping step on a generated scene.

Eight random tokens claim the pixels of a 16x16 feature map. Every pixel goes
to exactly one token, yet gradients still flow through the soft scores.
"""
import numpy as np

from refgroup import tensor as T
from refgroup.grouping import group_block
from refgroup.nn import MLP
from refgroup.params import ParamStore
from refgroup.rng import Rng
from refgroup.synth import generate_dataset
from refgroup.tensor import Tensor

sample = generate_dataset(seed=3, n_samples=1)[0]
print("expression:", " ".join(sample.words))
for obj in sample.objects:
    print("  object:", obj.attributes())

# stand-in visual features: average-pool the image down to 16x16
img = sample.image.reshape(16, 4, 16, 4, 3).mean(axis=(1, 3))
D = Tensor(np.concatenate([img, img ** 2], axis=-1))
n, ct, cv = 8, 6, D.shape[-1]

r = np.random.default_rng(0)
store = ParamStore()
mlp = MLP(store, "demo", ct, ct, ct, Rng(0, "mlp"))
W_t = Tensor(r.normal(size=(ct, ct)) / np.sqrt(ct), requires_grad=True)
W_d = Tensor(r.normal(size=(cv, ct)) / np.sqrt(cv), requires_grad=True)
tokens = Tensor(r.normal(size=(n, ct)))
tau = Tensor(np.array([0.5]), requires_grad=True)
G = T.gumbel_sample(Rng(1, "noise"), (n, 16 * 16))


def show(title, a):
    print(f"\n{title}")
    for row in a.labels().reshape(16, 16):
        print("  " + "".join(str(k) for k in row))


# cosine scores live in [-1, 1], so training-time noise reshuffles most pixels
_, clean = group_block(tokens, D, W_t, W_d, mlp, tau, pooling="mean")
show("token owning each pixel, no noise (evaluation):", clean)
new_tokens, a = group_block(tokens, D, W_t, W_d, mlp, tau, G, pooling="mean")
show("same, with Gumbel noise (training):", a)

m = a.S_mask.data
print("\nmask entries are 0/1:", set(np.unique(m)) <= {0.0, 1.0})
print("each pixel has one owner:", bool(np.all(m.sum(axis=0) == 1)))
print("pixels per token:", m.sum(axis=1).astype(int).tolist())

# the hard mask and the soft scores give the same parameter gradients
C = Tensor(r.normal(size=m.shape))
grads = []
for field in ("S_mask", "S_gumbel"):
    W_t.grad = W_d.grad = tau.grad = None
    _, a = group_block(tokens, D, W_t, W_d, mlp, tau, G, pooling="mean")
    (getattr(a, field) * C).sum().backward()
    grads.append((W_t.grad.copy(), W_d.grad.copy(), tau.grad.copy()))
gap = max(float(np.abs(x - y).max()) for x, y in zip(*grads))
print("largest gradient gap, hard vs soft path:", gap)
