"""Tour of the tensor engine: graphs, gradients, and the rules they obey.

Run with: python3 demos/01_autodiff.py
"""

import numpy as np

from semcross import tensor as T
from semcross.errors import ContractError
from semcross.gradcheck import check_op_gradients, finite_difference_gradient
from semcross.tensor import Tensor, backward

# A leaf is a Tensor with requires_grad=True; everything downstream of it
# records what it needs for the reverse pass.
w = Tensor(np.array([[0.5, -1.0], [2.0, 0.1]]), requires_grad=True)
x = Tensor(np.array([[1.0], [3.0]]))
loss = T.sum_(T.relu(T.matmul(w, x)))
backward(loss)
print("loss:", float(loss.data))
print("dloss/dw:\n", w.grad)

# The engine enforces one backward per graph. Reusing an intermediate whose
# tape was already consumed is a bug, and it says so instead of silently
# returning wrong gradients.
y = T.scale(w, 2.0)
backward(T.sum_(y))
try:
    backward(T.sum_(y))
except ContractError as e:
    print("\nsecond backward through the same node ->", e)

# Leaves accumulate across backwards until someone clears them; that is the
# optimizer's job in the training loop.
print("\nw.grad after two backwards (accumulated):\n", w.grad)

# Every gradient rule is checked against central finite differences. The
# same harness the release gate uses is callable directly:
w.grad = None
fd = finite_difference_gradient(
    lambda t: float(T.sum_(T.relu(T.matmul(t, Tensor(x.data)))).data), w
)
backward(T.sum_(T.relu(T.matmul(w, Tensor(x.data)))))
print("\nmax |analytic - finite difference|:", float(np.max(np.abs(w.grad - fd))))

with T.precision("float64"):
    for r in check_op_gradients(seed=0, cases_per_op=2, ops=("matmul", "softmax", "conv2d_nhwc")):
        print(f"  {r.op:12s} max_rel_err={r.max_rel_err:.2e} ({r.cases} cases)")
