"""Reference model builders and per-experiment configuration defaults.

Builders accept explicit unit counts so the cost analyzer can be fed the
published per-layer sizes of shrunk models directly, without retraining.
"""

from .nncore import (
    AvgPool2D, Conv2D, Dense, Flatten, MaxPool2D, Model, PolyAct, ReLU,
    Sigmoid, Softmax, SquareAct,
)


def lenet5(seed=0):
    """LeNet-5 for 28x28 grayscale, 10 classes; first conv is same-padded."""
    return Model((28, 28, 1), [
        Conv2D(6, 5, 1, "same"), ReLU(), MaxPool2D(2),
        Conv2D(16, 5), ReLU(), MaxPool2D(2),
        Conv2D(120, 5), ReLU(), Flatten(),
        Dense(84), ReLU(), Dense(10), Softmax(),
    ], seed=seed, metadata={"arch": "lenet5"})


def lenet5_hef(units=(6, 16, 120, 84), activation="poly", degree=2, seed=0):
    """HE-friendly LeNet shape with configurable per-layer unit counts."""
    c0, c1, c2, d0 = units
    act = (lambda: PolyAct(degree)) if activation == "poly" else (lambda: SquareAct())
    return Model((28, 28, 1), [
        Conv2D(c0, 5, 1, "same"), act(), AvgPool2D(2),
        Conv2D(c1, 5), act(), AvgPool2D(2),
        Conv2D(c2, 5), act(), Flatten(),
        Dense(d0), act(), Dense(10),
    ], seed=seed, metadata={"arch": "lenet5", "stage": "hef"})


def egss_fcnet(seed=0):
    """Binary grid-stability classifier over the 12 EGSS predictors."""
    return Model((12,), [
        Dense(64), ReLU(), Dense(128), ReLU(), Dense(256), ReLU(),
        Dense(2), Softmax(),
    ], seed=seed, metadata={"arch": "fcnet"})


def egss_fcnet_hef(units=(64, 128, 256), activation="poly", degree=2, seed=0):
    u0, u1, u2 = units
    act = (lambda: PolyAct(degree)) if activation == "poly" else (lambda: SquareAct())
    return Model((12,), [
        Dense(u0), act(), Dense(u1), act(), Dense(u2), act(), Dense(2),
    ], seed=seed, metadata={"arch": "fcnet", "stage": "hef"})


def autoencoder(hidden, seed=0):
    """MNIST-shaped autoencoder with the given hidden layer widths."""
    layers = [Flatten()]
    for width in hidden:
        layers += [Dense(width), ReLU()]
    layers.append(Dense(784))
    return Model((28, 28, 1), layers, seed=seed,
                 metadata={"arch": f"ae{len(hidden)}"})


def ae1(seed=0):
    return autoencoder([32], seed=seed)


def ae2(seed=0):
    return autoencoder([64], seed=seed)


def ae3(seed=0):
    return autoencoder([64, 32, 64], seed=seed)


def autoencoder_hef(hidden, activation="poly", degree=2, seed=0):
    act = (lambda: PolyAct(degree)) if activation == "poly" else (lambda: SquareAct())
    layers = [Flatten()]
    for width in hidden:
        layers += [Dense(width), act()]
    layers.append(Dense(784))
    return Model((28, 28, 1), layers, seed=seed,
                 metadata={"arch": f"ae{len(hidden)}", "stage": "hef"})


BUILDERS = {
    "lenet5": lenet5,
    "fcnet": egss_fcnet,
    "ae1": ae1,
    "ae2": ae2,
    "ae3": ae3,
}

# published per-experiment settings: epochs (original/transfer/finetune),
# patience, pruning epochs, learning rates, and crypto parameters
EXPERIMENTS = {
    "mnist-lenet": {
        "arch": "lenet5", "problem": "classification",
        "splits": (57000, 3000, 10000),
        "oe": 100, "te": 100, "fe": 100, "pe": 10, "re": 100,
        "lr": 1e-3, "tl": 1e-3, "fl": 1e-4,
        "pmd": 32768, "cm_bits": 860,
    },
    "egss-fcnet": {
        "arch": "fcnet", "problem": "classification",
        "splits": (8550, 450, 1000),
        "oe": 100, "te": 100, "fe": 100, "pe": 10, "re": 100,
        "lr": 1e-3, "tl": 1e-3, "fl": 1e-4,
        "pmd": 16384, "cm_bits": 290,
    },
    "mnist-ae1": {
        "arch": "ae1", "problem": "regression",
        "splits": (57000, 3000, 10000),
        "oe": 20, "te": 50, "fe": 50, "pe": 10, "re": 5,
        "lr": 1e-3, "tl": 1e-3, "fl": 1e-4,
        "pmd": 8192, "cm_bits": 200,
    },
    "mnist-ae2": {
        "arch": "ae2", "problem": "regression",
        "splits": (57000, 3000, 10000),
        "oe": 30, "te": 50, "fe": 50, "pe": 10, "re": 10,
        "lr": 1e-3, "tl": 1e-3, "fl": 1e-4,
        "pmd": 8192, "cm_bits": 200,
    },
    "mnist-ae3": {
        "arch": "ae3", "problem": "regression",
        "splits": (57000, 3000, 10000),
        "oe": 30, "te": 50, "fe": 50, "pe": 10, "re": 10,
        "lr": 1e-3, "tl": 1e-3, "fl": 1e-4,
        "pmd": 16384, "cm_bits": 200,
    },
}

# published unit counts per layer-wise sparsity (prunable layers in order),
# used to reproduce the cost table without retraining
LENET_UNITS = {
    "hef": (6, 16, 120, 84),
    0.50: (3, 8, 61, 48),
    0.60: (3, 7, 51, 39),
    0.80: (1, 3, 25, 18),
    0.90: (1, 2, 16, 9),
}
