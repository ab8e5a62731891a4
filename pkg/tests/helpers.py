"""Shared builders for the test suite."""

import numpy as np

from inq.engine import Conv2D, Dense, Flatten, MaxPool2D, Network, ReLU, loss_and_gradients
from inq.quantizer import QuantGrid


def random_instance(kind: str, rng):
    """A tiny random network exercising ``kind`` plus a batch and labels."""
    classes = int(rng.integers(2, 5))
    b = int(rng.integers(2, 5))
    if kind == "Dense":
        n_in = int(rng.integers(2, 6))
        layers = [Dense(n_in, classes)]
        shape = (n_in,)
    elif kind == "ReLU":
        n_in, hidden = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        layers = [Dense(n_in, hidden), ReLU(), Dense(hidden, classes)]
        shape = (n_in,)
    elif kind == "Conv2D":
        c, k = int(rng.integers(1, 3)), int(rng.integers(1, 4))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        size = int(rng.integers(k + 1, 7))
        conv = Conv2D(c, int(rng.integers(1, 4)), k, stride=stride, padding=pad)
        out = conv.output_shape((c, size, size))
        layers = [conv, Flatten(), Dense(int(np.prod(out)), classes)]
        shape = (c, size, size)
    elif kind == "MaxPool2D":
        c, p = int(rng.integers(1, 3)), int(rng.integers(2, 4))
        size = int(rng.integers(p, 3 * p + 1))
        pool = MaxPool2D(p)
        out = pool.output_shape((c, size, size))
        layers = [pool, Flatten(), Dense(int(np.prod(out)), classes)]
        shape = (c, size, size)
    else:
        raise ValueError(kind)
    net = Network(shape, layers, seed=int(rng.integers(1 << 30)))
    for w, bias in net.params:
        bias[:] = rng.normal(scale=0.1, size=bias.shape)
    x = rng.normal(size=(b,) + shape)
    y = rng.integers(0, classes, b)
    return net, x, y


def finite_difference_check(net, x, y, h=1e-6):
    """Worst relative error between analytic and central-difference gradients,
    taken over every parameter and relative to each tensor's gradient scale."""
    _, grads, _ = loss_and_gradients(net, x, y)
    worst = 0.0
    for (w, b), (gw, gb) in zip(net.params, grads):
        for p, g in ((w, gw), (b, gb)):
            num = np.zeros_like(p)
            for i in np.ndindex(p.shape):
                orig = p[i]
                p[i] = orig + h
                lp = loss_and_gradients(net, x, y)[0]
                p[i] = orig - h
                lm = loss_and_gradients(net, x, y)[0]
                p[i] = orig
                num[i] = (lp - lm) / (2 * h)
            scale = max(np.abs(num).max(), np.abs(g).max(), 1e-8)
            worst = max(worst, float(np.abs(num - g).max() / scale))
    return worst


def random_grid_tensor(rng, grid: QuantGrid, shape, zero_frac=0.3):
    levels = grid.levels
    nonzero = levels[levels != 0]
    out = rng.choice(nonzero, size=shape)
    out[rng.random(shape) < zero_frac] = 0.0
    return out


def random_quantized_model(rng, kinds=("Dense", "Conv2D", "MaxPool2D", "ReLU")):
    """A random small network with every weight moved onto a random b-bit grid,
    returned as a QuantizedModel together with a matching input batch."""
    from inq.container import QuantizedModel

    net, x, _ = random_instance(str(rng.choice(kinds)), rng)
    grids = []
    for p in net.params:
        grid = QuantGrid(int(rng.integers(2, 7)), int(rng.integers(-8, 3)))
        p[0] = random_grid_tensor(rng, grid, p[0].shape, zero_frac=float(rng.uniform(0, 0.6)))
        grids.append(grid)
    return QuantizedModel.from_network(net, grids), x


# criterion number -> (passed, title, detail); printed by conftest at the end
ACCEPTANCE_RESULTS: dict = {}
