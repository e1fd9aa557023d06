"""Central finite-difference check of the analytic gradients."""

import numpy as np

from . import ops


def relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def grad_check(model, inputs, labels, epsilon=1e-6, n_checks=100, seed=0,
               params=None, train=True):
    """Largest relative error between analytic and numeric gradients.

    The model is copied to float64 first.  Entries are drawn from every
    parameter tensor (or only those named in ``params``) so that at least
    ``n_checks`` scalars are perturbed in total.

    Returns ``(max_error, n_checked)``.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-6, 1e-3]")
    m64 = model.astype(np.float64)
    inputs = {k: np.asarray(v, dtype=np.float64) for k, v in inputs.items()}
    state0 = {k: v.copy() for k, v in m64.named_buffers()}

    def loss():
        # batch statistics mutate the running buffers; keep them fixed
        for name, buf in m64.named_buffers():
            buf[...] = state0[name]
        value, _ = ops.nll_loss(m64.forward(inputs, train), labels)
        return value

    for name, buf in m64.named_buffers():
        buf[...] = state0[name]
    m64.loss_and_grad(inputs, labels, train)
    grads = {k: g.copy() for k, g in m64.named_grads()}
    tensors = [(k, p) for k, p in m64.named_params() if params is None or k in params]
    # spread the checks evenly; small tensors hand their shortfall on
    quota, left = {}, n_checks
    by_size = sorted(range(len(tensors)), key=lambda t: tensors[t][1].size)
    for rank, t in enumerate(by_size):
        share = max(1, -(-left // (len(tensors) - rank)))
        quota[t] = min(share, tensors[t][1].size)
        left = max(0, left - quota[t])
    rng = np.random.default_rng(seed)
    worst, count = 0.0, 0
    for t, (name, p) in enumerate(tensors):
        flat = p.reshape(-1)
        picks = rng.choice(flat.size, size=quota[t], replace=False)
        for idx in picks:
            orig = flat[idx]
            flat[idx] = orig + epsilon
            up = loss()
            flat[idx] = orig - epsilon
            down = loss()
            flat[idx] = orig
            numeric = (up - down) / (2 * epsilon)
            analytic = grads[name].reshape(-1)[idx]
            worst = max(worst, relative_error(analytic, numeric))
            count += 1
    return worst, count
