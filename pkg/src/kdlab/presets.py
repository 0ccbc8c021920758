"""Teacher and student architectures.

The full presets reproduce the layer counts of the reference teacher/student
table and land within 1% of its parameter totals (the table gives totals,
not widths, so widths here are chosen to fit). Every general and every
baseline student matches its total exactly.

``*-desk`` presets keep the same layer structure with narrower convolutions
and hidden layers so that CPU-only runs finish in minutes.
"""

from __future__ import annotations

from .nn import BatchNorm, Conv2D, Dense, Dropout, Flatten, MaxPool2, ModelSpec, Output, ReLU

# reference totals: (dataset, role) -> parameters
TABLE_TOTALS = {
    ("mnist", "large"): 2_560_906,
    ("mnist", "small"): 1_433_610,
    ("mnist", "general"): 20_490,
    ("mnist", "baseline"): 7_850,
    ("fashion-mnist", "large"): 2_339_850,
    ("fashion-mnist", "small"): 1_558_538,
    ("fashion-mnist", "general"): 50_186,
    ("fashion-mnist", "baseline"): 7_850,
    ("cifar10", "large"): 26_902_442,
    ("cifar10", "small"): 5_674_634,
    ("cifar10", "general"): 534_666,
    ("cifar10", "baseline"): 30_730,
}

INPUT_SHAPES = {"mnist": (1, 28, 28), "fashion-mnist": (1, 28, 28), "cifar10": (3, 32, 32)}


def _conv_stack(c_in, widths, pool_after, bn=False):
    """3×3 'same' convolutions with ReLU; 2×2 max-pool after the listed indices."""
    layers = []
    for i, c in enumerate(widths):
        layers.append(Conv2D(c_in, c, 3, 3, 1, "same"))
        if bn:
            layers.append(BatchNorm(c))
        layers.append(ReLU())
        if i in pool_after:
            layers.append(MaxPool2())
        c_in = c
    return layers


def _dense_head(d_in, hidden, classes=10, dropout=0.0):
    layers = [Flatten()]
    for h in hidden:
        layers += [Dense(d_in, h), ReLU()]
        if dropout:
            layers.append(Dropout(dropout))
        d_in = h
    layers += [Dense(d_in, classes), Output(classes)]
    return layers


def _flat(input_shape, convs, pool_after):
    _, h, w = input_shape
    h >>= len(pool_after)
    w >>= len(pool_after)
    return convs[-1] * h * w if convs else input_shape[0] * input_shape[1] * input_shape[2]


def _build(name, dataset, convs=(), pool_after=(), hidden=(), dropout=0.0, bn=False):
    shape = INPUT_SHAPES[dataset]
    layers = _conv_stack(shape[0], convs, pool_after, bn)
    layers += _dense_head(_flat(shape, convs, pool_after), hidden, 10, dropout)
    return ModelSpec(tuple(layers), shape, name)


_ARCHS = {
    # name: (dataset, convs, pool_after, hidden, dropout, bn)
    "mnist-large": ("mnist", (32, 64, 128), (0, 1), (384, 150), 0.5, False),
    "mnist-small": ("mnist", (32, 176), (), (), 0.0, False),
    "mnist-general": ("mnist", (16, 32), (0, 1), (), 0.0, False),
    "mnist-baseline": ("mnist", (), (), (), 0.0, False),
    "fashion-mnist-large": ("fashion-mnist", (32, 32, 64, 64), (1, 3), (660, 256, 128), 0.5, False),
    "fashion-mnist-small": ("fashion-mnist", (32, 64, 183), (), (), 0.0, False),
    "fashion-mnist-general": ("fashion-mnist", (32, 64), (0, 1), (), 0.0, False),
    "fashion-mnist-baseline": ("fashion-mnist", (), (), (), 0.0, False),
    "cifar10-large": ("cifar10", (64, 64, 128, 128, 256, 256, 512, 512), (1, 3, 5), (2409, 1024), 0.5, True),
    "cifar10-small": ("cifar10", (64, 128, 490), (), (), 0.0, False),
    "cifar10-general": ("cifar10", (64, 128, 256), (0, 1), (), 0.0, False),
    "cifar10-baseline": ("cifar10", (), (), (), 0.0, False),
    # reduced-width variants for CPU runs
    "mnist-large-desk": ("mnist", (8, 16, 16), (0, 1), (256, 128), 0.25, False),
    "mnist-small-desk": ("mnist", (4, 8), (0, 1), (), 0.0, False),
    "mnist-general-desk": ("mnist", (8, 16), (0, 1), (), 0.0, False),
}

PRESETS = sorted(_ARCHS)

# Training recipes for the desk presets on the 10k MNIST subset. The large
# teacher is trained confidently (small batches, many epochs); the small one
# briefly, which keeps its soft labels high-entropy.
DESK_TRAINING = {
    "mnist-large-desk": {"batch_size": 32, "epochs": 12},
    "mnist-small-desk": {"batch_size": 64, "epochs": 3},
    "mnist-general-desk": {"batch_size": 64, "epochs": 5},  # students on the full transfer set
}


def preset(name: str) -> ModelSpec:
    if name not in _ARCHS:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    dataset, convs, pool_after, hidden, dropout, bn = _ARCHS[name]
    return _build(name, dataset, convs, pool_after, hidden, dropout, bn)


def table_total(name: str):
    """Published parameter total for a full preset, or None for desk variants."""
    dataset, _, role = name.rpartition("-")
    return TABLE_TOTALS.get((dataset, role))
