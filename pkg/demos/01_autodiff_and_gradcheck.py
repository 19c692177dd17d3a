"""Reverse-mode differentiation and finite-difference checking.

Builds a small graph by hand, backpropagates through it, then verifies the
analytic gradients of a convolution and an LSTM step numerically.

    python3 demos/01_autodiff_and_gradcheck.py
"""

import numpy as np

from ssar import autodiff as ad
from ssar.autodiff import Tensor, precision
from ssar.gradcheck import check_gradients, run_suite, summarize
from ssar.layers import LstmParams, LstmState, lstm_step

with precision(np.float64):
    # loss = sum(relu(W x + b)); d loss / d b is the ReLU mask
    W = Tensor([[1.0, -2.0], [0.5, 0.5]], requires_grad=True)
    x = Tensor([1.0, 1.0])
    b = Tensor([2.0, -2.0], requires_grad=True)
    loss = ad.reduce("sum", ad.relu(ad.add(ad.matmul(W, x), b)))
    loss.backward()
    print("loss", loss.item())
    print("dL/db", b.grad, " dL/dW", W.grad.tolist())

    rng = np.random.default_rng(0)
    img = Tensor(rng.standard_normal((2, 7, 7)), requires_grad=True)
    kernel = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    res = check_gradients(lambda a, k: ad.conv2d(a, k, stride=2, pad=1), [img, kernel], "conv2d")
    print(f"conv2d    max rel err {res.max_rel_error:.2e} over {res.n_checked} entries")

    p = LstmParams.init(4, 3, rng)
    weights = [t for _, t in p.named_parameters()]
    xt = Tensor(rng.standard_normal(4), requires_grad=True)

    def step(inp, *ws):
        return lstm_step(inp, LstmState.zeros(3), LstmParams(*ws)).h

    res = check_gradients(step, [xt] + weights, "lstm_step")
    print(f"lstm_step max rel err {res.max_rel_error:.2e} over {res.n_checked} entries")

# the same suite the CLI runs with `ssar gradcheck --scope layer`
for name, n, err, ok in summarize(run_suite("layer", instances=2)):
    print(f"{name:<14} {n} {err:.2e} {'PASS' if ok else 'FAIL'}")
