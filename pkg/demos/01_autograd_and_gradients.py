"""Tour of the autograd core: ops, backward, and a finite-difference check.

Every numeric operation in the package runs on these Tensors. Recording
happens automatically whenever an operand requires gradients, and
`backward` returns a map from each trainable leaf to its gradient.
"""

import numpy as np

from mvfa import autograd as ag
from mvfa.autograd import Tensor, backward, no_grad

rng = np.random.default_rng(0)

# a tiny two-layer network with an l2-normalized softmax head
x = Tensor(rng.standard_normal((4, 6)).astype(np.float32))
w1 = Tensor(rng.standard_normal((6, 8)).astype(np.float32) * 0.3, requires_grad=True)
w2 = Tensor(rng.standard_normal((8, 2)).astype(np.float32) * 0.3, requires_grad=True)

hidden = ag.relu(ag.matmul(x, w1))
probs = ag.softmax_rows(ag.matmul(ag.l2norm_rows(hidden), w2))
loss = ag.scale(ag.mean(ag.log(ag.clip(probs, 1e-7, 1.0))), -1.0)
print(f"loss: {loss.item():.4f}")
print(f"softmax rows sum to {probs.data.sum(axis=1)}")

grads = backward(loss)
print(f"gradient tensors returned: {len(grads)} (w1 and w2)")
print(f"|dL/dw1| mean: {np.abs(grads[w1].data).mean():.5f}")

# cross-check one entry against a central finite difference (64-bit)
w1_64 = Tensor(w1.data.astype(np.float64), requires_grad=True)
w2_64 = Tensor(w2.data.astype(np.float64), requires_grad=True)
x_64 = Tensor(x.data.astype(np.float64))


def loss_value():
    with no_grad():
        h = ag.relu(ag.matmul(x_64, w1_64))
        p = ag.softmax_rows(ag.matmul(ag.l2norm_rows(h), w2_64))
        return -float(ag.mean(ag.log(ag.clip(p, 1e-7, 1.0))).data)


h = 1e-3
flat = w1_64.data.reshape(-1)
orig = flat[0]
flat[0] = orig + h
f_plus = loss_value()
flat[0] = orig - h
f_minus = loss_value()
flat[0] = orig
numeric = (f_plus - f_minus) / (2 * h)

analytic_loss = ag.scale(ag.mean(ag.log(ag.clip(
    ag.softmax_rows(ag.matmul(ag.l2norm_rows(ag.relu(ag.matmul(x_64, w1_64))),
                              w2_64)), 1e-7, 1.0))), -1.0)
analytic = backward(analytic_loss)[w1_64].data.reshape(-1)[0]
print(f"finite difference {numeric:+.8f} vs analytic {analytic:+.8f}")

# align-corners bilinear upsampling is differentiable too
grid = Tensor(np.array([[0.0, 1.0], [1.0, 0.0]]), requires_grad=True,
              dtype=np.float64)
big = ag.bilinear_upsample(grid, (5, 5))
print("2x2 checkerboard upsampled to 5x5, center row:", np.round(big.data[2], 3))
backward(ag.sum(big))
print("done")
