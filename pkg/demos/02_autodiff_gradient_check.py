"""The tensor engine end to end: a small conv/norm/attention stack, gradients
verified against central finite differences, then a few Adam steps on a toy
regression to watch the loss fall.
"""

import numpy as np

from mattekit import autodiff as ad

rng = np.random.default_rng(0)

# --- a three-layer stack in float64 for gradient checking -------------------
x = ad.Tensor(rng.standard_normal((4, 6, 6)), dtype=np.float64)
w1 = ad.Tensor(rng.standard_normal((4, 4, 3, 3)) * 0.3, requires_grad=True)
gamma = ad.Tensor(np.ones(4), requires_grad=True)
beta = ad.Tensor(np.zeros(4), requires_grad=True)
attn = ad.AttentionParams(
    wq=ad.Tensor(rng.standard_normal((2, 4, 1, 1)) * 0.3, requires_grad=True),
    bq=ad.Tensor(np.zeros(2), requires_grad=True),
    wk=ad.Tensor(rng.standard_normal((2, 4, 1, 1)) * 0.3, requires_grad=True),
    bk=ad.Tensor(np.zeros(2), requires_grad=True),
    wv=ad.Tensor(rng.standard_normal((4, 4, 1, 1)) * 0.3, requires_grad=True),
    bv=ad.Tensor(np.zeros(4), requires_grad=True),
    wp=ad.Tensor(rng.standard_normal((4, 4, 1, 1)) * 0.3, requires_grad=True),
    bp=ad.Tensor(np.zeros(4), requires_grad=True),
    gate=ad.Tensor(np.array([0.5]), requires_grad=True))
state = ad.BNState.fresh(4, np.float64)
target = rng.standard_normal((4, 6, 6))


def forward(weight_data):
    w = ad.Tensor(weight_data)
    h = ad.conv2d(x, w, None, padding=1)
    h = ad.batch_norm(h, ad.Tensor(gamma.data), ad.Tensor(beta.data),
                      state.copy(), training=True)
    h = ad.leaky_relu(h, 0.2)
    h = ad.self_attention2d(h, ad.AttentionParams(
        **{k: ad.Tensor(t.data) for k, t in attn.tensors().items()}))
    return ad.sum_(ad.mul(ad.sub(h, ad.Tensor(target)),
                          ad.sub(h, ad.Tensor(target))))


loss = None
h = ad.conv2d(x, w1, None, padding=1)
h = ad.batch_norm(h, gamma, beta, state.copy(), training=True)
h = ad.leaky_relu(h, 0.2)
h = ad.self_attention2d(h, attn)
loss = ad.sum_(ad.mul(ad.sub(h, ad.Tensor(target)), ad.sub(h, ad.Tensor(target))))
loss.backward()

# central differences on a few conv-weight coordinates
picks = rng.choice(w1.size, size=8, replace=False)
h_step = 1e-5
worst = 0.0
flat = w1.data.reshape(-1)
for i in picks:
    orig = flat[i]
    flat[i] = orig + h_step
    up = forward(w1.data).item()
    flat[i] = orig - h_step
    down = forward(w1.data).item()
    flat[i] = orig
    numeric = (up - down) / (2 * h_step)
    analytic = w1.grad.reshape(-1)[i]
    worst = max(worst, abs(analytic - numeric) / max(abs(analytic),
                                                     abs(numeric), 1e-3))
print(f"finite-difference check on sampled conv weights: "
      f"max relative error = {worst:.2e}")
assert worst < 1e-4

# --- Adam on a toy fit ------------------------------------------------------
params = ad.ParamSet()
wfit = params.add("w", ad.Tensor(np.zeros((1, 4, 1, 1), np.float32),
                                 requires_grad=True))
bfit = params.add("b", ad.Tensor(np.zeros(1, np.float32), requires_grad=True))
adam = ad.AdamState()
inputs = ad.Tensor(rng.standard_normal((4, 8, 8)).astype(np.float32))
true_w = np.array([0.5, -1.0, 0.25, 2.0], np.float32)
labels = ad.Tensor(np.tensordot(true_w, inputs.data, axes=(0, 0))[None] + 0.3)

for step in range(200):
    params.zero_grads()
    pred = ad.conv2d(inputs, wfit, bfit)
    diff = ad.sub(pred, labels)
    loss = ad.mean_(ad.mul(diff, diff))
    loss.backward()
    ad.adam_step(params, adam, lr=0.05, beta1=0.5, beta2=0.99)
    if step % 50 == 0 or step == 199:
        print(f"step {step:3d}: mse = {loss.item():.6f}")

print(f"recovered weights: {wfit.data.reshape(-1).round(3)} "
      f"(true {true_w}), bias {bfit.data[0]:.3f} (true 0.3)")
