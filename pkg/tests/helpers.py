import numpy as np

from irkd import tensor as T


def numeric_grad(fn, x: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Central differences of scalar ``fn`` w.r.t. every entry of ``x`` (mutated and restored)."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + eps
        hi = fn()
        x[i] = orig - eps
        lo = fn()
        x[i] = orig
        grad[i] = (hi - lo) / (2 * eps)
    return grad


def rel_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


def check_gradients(build, arrays: list[np.ndarray], eps: float = 1e-3, dtype=np.float64) -> float:
    """Worst relative error between backward and central differences for every input of ``build``.

    ``build`` maps a list of leaf Tensors to a scalar Tensor. Backward runs in ``dtype``;
    the finite differences always run in double precision on the same (rounded) values.
    """
    arrays = [np.asarray(a, dtype=dtype).astype(np.float64) for a in arrays]
    leaves = [T.Tensor(a.astype(dtype), requires_grad=True) for a in arrays]
    loss = build(leaves)
    T.backward(loss)
    worst = 0.0
    for leaf, arr in zip(leaves, arrays):

        def fn():
            with T.no_grad():
                return float(build([T.Tensor(a) for a in arrays]).data)

        num = numeric_grad(fn, arr, eps)
        worst = max(worst, rel_error(leaf.grad, num))
    return worst


def naive_conv2d(x, k, b, stride=1, padding=0):
    n, c, h, w = x.shape
    co, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for a in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = b[o]
                    for ci in range(c):
                        for p in range(kh):
                            for q in range(kw):
                                acc += xp[a, ci, i * stride + p, j * stride + q] * k[o, ci, p, q]
                    out[a, o, i, j] = acc
    return out
