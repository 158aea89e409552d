import numpy as np
import pytest

from sprd import tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with T.verification_mode():
        yield


def rand_tensor(rng, *shape, grad=True, name=None):
    return T.Tensor(rng.normal(size=shape), requires_grad=grad, name=name)


def naive_conv2d(x, w, b, stride=1, pad=0, dil=1):
    """Direct seven-loop convolution, the reference for the im2col kernel."""
    n, c, h, wd = x.shape
    co, ci, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - dil * (k - 1) - 1) // stride + 1
    wo = (wd + 2 * pad - dil * (k - 1) - 1) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for i in range(n):
        for o in range(co):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0 if b is None else b[o]
                    for cc in range(ci):
                        for ky in range(k):
                            for kx in range(k):
                                acc += w[o, cc, ky, kx] * xp[i, cc, y * stride + ky * dil, xx * stride + kx * dil]
                    out[i, o, y, xx] = acc
    return out
