"""Sequential model container: layer graph, parameters, forward/backward."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .layers import GlobalAvgPool, Layer, Softmax
from .tensor import Rng, ShapeError


@dataclass
class ModelSpec:
    kind: str
    input_shape: tuple
    classes: int
    layers: list  # [(name, Layer)]
    options: dict = field(default_factory=dict)

    def shapes(self):
        """Per-layer (name, layer, in_shape, out_shape); raises on any inconsistency."""
        out = []
        shape = tuple(self.input_shape)
        for name, layer in self.layers:
            try:
                nxt = layer.output_shape(shape)
            except ShapeError as e:
                raise ShapeError(f"layer {name!r}: {e}") from None
            out.append((name, layer, shape, nxt))
            shape = nxt
        if shape != (self.classes,):
            raise ShapeError(f"model output {shape} does not match {self.classes} classes")
        return out

    def param_counts(self):
        rows = []
        for name, layer, s_in, s_out in self.shapes():
            n = sum(math.prod(s) for _, s in _walk_shapes(layer.param_shapes(s_in), layer))
            rows.append((name, layer, s_out, n))
        return rows


def _walk_shapes(shapes, layer, prefix=""):
    # only trainable entries count as parameters
    for key, val in shapes.items():
        if isinstance(val, dict):
            sub = dict(layer.layers)[key]
            yield from _walk_shapes(val, sub, f"{prefix}{key}/")
        elif key in layer.trainable:
            yield prefix + key, val


def _walk(tree: dict, layer: Layer, prefix: str):
    """Yield (name, array, trainable) for every tensor under a layer's params."""
    sub = dict(getattr(layer, "layers", ()))
    for key in sorted(tree):
        val = tree[key]
        if isinstance(val, dict):
            yield from _walk(val, sub[key], f"{prefix}{key}/")
        else:
            yield prefix + key, val, key in layer.trainable


class Model:
    def __init__(self, spec: ModelSpec, rng: Rng | None = None, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.params = {}
        for name, layer, s_in, _ in spec.shapes():
            p = layer.init(s_in, rng, self.dtype)
            if p:
                self.params[name] = p
        self.frozen: set[str] = set()

    @property
    def layers(self):
        return self.spec.layers

    def named_tensors(self):
        """(name, array, trainable) in a fixed order: layer order, then sorted keys."""
        for name, layer in self.layers:
            if name in self.params:
                yield from _walk(self.params[name], layer, name + "/")

    def trainable_tensors(self):
        for name, layer in self.layers:
            if name in self.params and name not in self.frozen:
                for full, arr, trainable in _walk(self.params[name], layer, name + "/"):
                    if trainable:
                        yield full, arr

    def get_tensor(self, full_name):
        parts = full_name.split("/")
        node = self.params
        for part in parts[:-1]:
            node = node[part]
        return node[parts[-1]]

    def set_tensor(self, full_name, value):
        parts = full_name.split("/")
        node = self.params
        for part in parts[:-1]:
            node = node[part]
        old = node[parts[-1]]
        if old.shape != value.shape:
            raise ShapeError(f"tensor {full_name}: expected shape {old.shape}, got {value.shape}")
        node[parts[-1]] = np.array(value, dtype=old.dtype)

    def param_count(self, trainable_only=True):
        return sum(a.size for _, a, t in self.named_tensors() if t or not trainable_only)

    def astype(self, dtype):
        """Copy of the model with every tensor cast (f64 mode for gradient checks)."""
        other = Model.__new__(Model)
        other.spec = self.spec
        other.dtype = np.dtype(dtype)
        other.frozen = set(self.frozen)
        other.params = _cast_tree(self.params, dtype)
        return other

    def forward(self, x, train=False, rng=None):
        """Run all layers.  Returns (probabilities, caches)."""
        expected = tuple(self.spec.input_shape)
        if tuple(x.shape[1:]) != expected:
            raise ShapeError(f"batch shape {x.shape} does not match model input {expected}")
        caches = []
        h = x
        for name, layer in self.layers:
            # frozen layers always run in inference mode; their statistics stay fixed
            mode = train and name not in self.frozen
            h, c = layer.forward(h, self.params.get(name), mode, rng)
            caches.append(c)
        return h, caches

    def backward(self, grad, caches, from_logits=False, need_input_grad=False):
        """Backpropagate ``grad``.  With from_logits the final softmax is skipped
        and ``grad`` is taken with respect to its input.  Returns (grad_x, grads)."""
        layers = list(self.layers)
        if from_logits:
            if not isinstance(layers[-1][1], Softmax):
                raise ValueError("from_logits requires a final softmax layer")
            layers = layers[:-1]
            caches = caches[:-1]
        grads = {}
        g = grad
        for (name, layer), c in zip(reversed(layers), reversed(caches)):
            if name in self.frozen and not need_input_grad:
                # everything before a frozen layer is frozen too
                return None, grads
            g, gp = layer.backward(g, c, self.params.get(name))
            if gp and name not in self.frozen:
                grads[name] = gp
        return g, grads

    def predict(self, x, batch_size=64):
        outs = []
        for i in range(0, len(x), batch_size):
            outs.append(self.forward(x[i:i + batch_size])[0])
        return np.concatenate(outs) if outs else np.zeros((0, self.spec.classes), self.dtype)

    def backbone_layers(self):
        """Names of all layers before the global average pool."""
        names = []
        for name, layer in self.layers:
            if isinstance(layer, GlobalAvgPool):
                return names
            names.append(name)
        raise ValueError("model has no global average pooling layer")


def _cast_tree(tree, dtype):
    return {k: _cast_tree(v, dtype) if isinstance(v, dict) else v.astype(dtype) for k, v in tree.items()}


def flatten_grads(grads: dict, prefix=""):
    """Flatten nested gradient dicts to {'layer/sub/param': array}."""
    out = {}
    for key, val in grads.items():
        if isinstance(val, dict):
            out.update(flatten_grads(val, f"{prefix}{key}/"))
        else:
            out[prefix + key] = val
    return out


def describe(spec: ModelSpec) -> str:
    rows = spec.param_counts()
    lines = [f"model: {spec.kind}  input: {tuple(spec.input_shape)}  classes: {spec.classes}"]
    lines.append(f"{'layer':<24} {'kind':<20} {'output shape':<18} {'params':>12}")
    total = 0
    for name, layer, shape, n in rows:
        total += n
        lines.append(f"{name:<24} {layer.kind:<20} {str(tuple(shape)):<18} {n:>12,}")
    lines.append(f"total parameters: {total:,}")
    return "\n".join(lines)
