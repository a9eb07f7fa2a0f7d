# coding: utf-8

# # A tour of the autodiff core
#
# Everything in wsloc trains on a small reverse-mode engine over float64
# numpy arrays. Operations record themselves on a `Tape` while one is open;
# `tape.backward(loss)` then walks the recording in reverse.

import numpy as np

from wsloc.diffcore import Adam, Tape, Tensor, conv1d, grad_check, relu, sigmoid, total, upsample_nearest

# ## Values and gradients
#
# A leaf that should receive a gradient is created with `requires_grad=True`.

x = Tensor([0.5, -1.0, 2.0], requires_grad=True)
with Tape() as tape:
    y = total(sigmoid(relu(x)) * 3.0)
tape.backward(y)
print("y =", y.item())
print("dy/dx =", x.grad)

# The ops on the tape, in the order they ran:

print([op.name for op in tape.ops])

# ## Checking a gradient by finite differences
#
# `grad_check` compares the tape gradient with central differences and
# returns the largest relative gap. A linear function is exact.

w = Tensor(np.random.default_rng(0).normal(size=(2, 3, 3)), requires_grad=True)
b = Tensor(np.zeros(2), requires_grad=True)
signal = Tensor(np.random.default_rng(1).normal(size=(3, 10)))
err = grad_check(lambda: total(sigmoid(conv1d(signal, w, b, 1, 1))), [w, b])
print(f"conv1d -> sigmoid -> sum: max relative error {err:.1e}")

# ## Copy-upsampling
#
# The reduced-resolution network predicts at T / 2^m steps and copies each
# score 2^m times to get back to T.

low = Tensor([[0.7, 0.6, 0.7, 0.8]])
print(upsample_nearest(low, 2, 8).data)

# ## A few optimizer steps
#
# Adam on (x - 3)^2 walks x toward 3.

p = Tensor([0.0], requires_grad=True)
opt = Adam([p], lr=0.3)
for step in range(60):
    opt.zero_grad()
    with Tape() as tape:
        loss = total((p - 3.0) * (p - 3.0))
    tape.backward(loss)
    opt.step()
print("x after 60 steps:", round(p.item(), 3))
