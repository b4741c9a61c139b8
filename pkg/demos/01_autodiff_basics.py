"""
Reverse-mode tape on plain numpy arrays
=======================================

Build a tiny computation under a recording tape, pull gradients back
through it, and confirm them against finite differences.
"""

import numpy as np

import spatialcausal.engine as E

rng = np.random.default_rng(0)

# leaf tensors track gradients; as_tensor wraps constants
w = E.Tensor(rng.normal(size=(3, 2)), requires_grad=True)
b = E.Tensor(np.zeros(2), requires_grad=True)
x = E.as_tensor(rng.normal(size=(5, 3)))

# one dense layer followed by a scalar loss, recorded then replayed
with E.Tape() as tape:
    h = E.relu(E.bias_add(E.matmul(x, w), b))
    loss = E.tmean(E.mul(h, h))
tape.backward(loss)

print("loss:", loss.data)
print("dL/dw:\n", w.grad)
print("dL/db:", b.grad)

# the same gradients, numerically
def rebuild():
    h = E.relu(E.bias_add(E.matmul(x, w), b))
    return E.tmean(E.mul(h, h))

report = E.finite_diff_check(rebuild, [w, b])
print("finite-diff max relative error:", report.max_rel_err)
assert report.passed

# every differentiable op kind registered with the tape
print("op kinds:", ", ".join(E.op_kinds()))

# a 2-d example: convolution, pooling, global average
img = E.as_tensor(rng.normal(size=(2, 1, 8, 8)))
k = E.Tensor(rng.normal(size=(4, 1, 3, 3)) * 0.3, requires_grad=True)

def conv_chain():
    feat = E.global_avg_pool(E.maxpool2(E.elu(E.conv2d(E.pad2d(img, 1, 1, 1, 1), k))))
    return E.tsum(feat)

k.zero_grad()
with E.Tape() as tape:
    out = conv_chain()
tape.backward(out)
print("conv kernel grad norm:", np.linalg.norm(k.grad))

report = E.finite_diff_check(conv_chain, [k])
print("conv chain max relative error:", report.max_rel_err)
assert report.passed
