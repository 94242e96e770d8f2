"""Model container: an ordered stack of layers with resolved shapes."""

import copy

import numpy as np

from ..errors import ShapeError
from .layers import ACTIVATION_KINDS, HE_FRIENDLY_KINDS, PARAMETERIZED_KINDS


class Model:
    """Ordered layer stack over a fixed input shape.

    Building resolves every layer's input/output shape and initializes
    parameters from a seeded generator (He-uniform when the stack contains a
    ReLU, Glorot-uniform otherwise), so identical seeds give identical models.
    """

    def __init__(self, input_shape, layers, seed=0, metadata=None):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.layers = list(layers)
        self.metadata = dict(metadata or {})
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        init = "he" if any(l.kind == "relu" for l in self.layers) else "glorot"
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.build(shape, rng, init)
        self.output_shape = shape

    def forward(self, x, train_mode=False):
        x = np.asarray(x, dtype=float)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(0, self.input_shape, x.shape[1:], "model input mismatch")
        for i, layer in enumerate(self.layers):
            if x.shape[1:] != layer.input_shape:
                raise ShapeError(i, layer.input_shape, x.shape[1:])
            x = layer.forward(x, train_mode=train_mode)
        return x

    def predict(self, x, batch_size=256):
        x = np.asarray(x, dtype=float)
        outs = [self.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        return np.concatenate(outs, axis=0)

    def copy(self):
        return copy.deepcopy(self)

    def n_params(self):
        return sum(layer.n_params() for layer in self.layers)

    def parameterized_indices(self):
        return [i for i, l in enumerate(self.layers) if l.kind in PARAMETERIZED_KINDS]

    def output_layer_index(self):
        """Index of the output layer: the last parameterized layer."""
        idxs = self.parameterized_indices()
        if not idxs:
            raise ValueError("model has no parameterized layer")
        return idxs[-1]

    def prunable_indices(self):
        """All Dense/Conv2D layers except the output layer."""
        return self.parameterized_indices()[:-1]

    def is_he_friendly(self):
        return all(l.kind in HE_FRIENDLY_KINDS for l in self.layers)

    def non_he_friendly_layers(self):
        return [(i, l.kind) for i, l in enumerate(self.layers) if l.kind not in HE_FRIENDLY_KINDS]

    def has_any(self, kinds):
        return any(l.kind in kinds for l in self.layers)

    def activation_indices(self):
        return [i for i, l in enumerate(self.layers) if l.kind in ACTIVATION_KINDS]

    def summary(self):
        lines = [f"input {self.input_shape}"]
        for i, l in enumerate(self.layers):
            lines.append(f"{i:3d} {l.kind:10s} {str(l.input_shape):>16s} -> {l.output_shape}"
                         f"  params={l.n_params()}")
        return "\n".join(lines)
