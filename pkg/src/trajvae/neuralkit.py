"""Dense two-layer perceptrons with hand-written reverse-mode gradients, Adam, and a binary parameter format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

SIGMA_FLOOR = 1e-4
FORMAT_MAGIC = b"TRAJVAE-PARAMS"
FORMAT_VERSION = 1

ACTIVATIONS = ("tanh", "identity", "softplus")


class ShapeError(ValueError):
    pass


class ExplodedError(ArithmeticError):
    pass


class FormatError(ValueError):
    pass


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class MlpParams:
    """Weights ``[out, in]`` and biases per layer.

    ``activations`` tags each layer. Outputs of the last layer at index
    ``>= softplus_from`` go through ``softplus(x) + SIGMA_FLOOR`` regardless of
    the last tag, which is how positive standard deviations are produced.
    """

    weights: list
    biases: list
    activations: list
    softplus_from: int | None = None

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ShapeError("weights, biases and activations differ in length")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: bias shape {b.shape} vs weight {w.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(f"layer {i}: input {w.shape[1]} != previous output {self.weights[i - 1].shape[0]}")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ShapeError(f"unknown activation {a!r}")

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def sizes(self) -> list[int]:
        return [self.n_in] + [w.shape[0] for w in self.weights]

    def named(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}layer{i}.weight"] = w
            out[f"{prefix}layer{i}.bias"] = b
        return out

    def with_named(self, named: dict, prefix: str = "") -> "MlpParams":
        n = len(self.weights)
        return MlpParams(
            [named[f"{prefix}layer{i}.weight"] for i in range(n)],
            [named[f"{prefix}layer{i}.bias"] for i in range(n)],
            list(self.activations),
            self.softplus_from,
        )

    def astype(self, dtype) -> "MlpParams":
        return MlpParams([w.astype(dtype) for w in self.weights], [b.astype(dtype) for b in self.biases],
                         list(self.activations), self.softplus_from)

    def copy(self) -> "MlpParams":
        return self.astype(self.weights[0].dtype)

    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def manifest(self) -> dict:
        return {"sizes": self.sizes, "activations": list(self.activations), "softplus_from": self.softplus_from}


GradientBundle = MlpParams


def init_mlp(sizes, activations, rng: np.random.Generator, softplus_from=None) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    return MlpParams(ws, bs, list(activations), softplus_from)


def zeros_mlp(sizes, activations, softplus_from=None) -> MlpParams:
    return MlpParams([np.zeros((o, i)) for i, o in zip(sizes[:-1], sizes[1:])],
                     [np.zeros(o) for o in sizes[1:]], list(activations), softplus_from)


def zeros_like(p: MlpParams) -> GradientBundle:
    return MlpParams([np.zeros_like(w) for w in p.weights], [np.zeros_like(b) for b in p.biases],
                     list(p.activations), p.softplus_from)


def _activate(tag, a):
    if tag == "tanh":
        return np.tanh(a)
    if tag == "softplus":
        return softplus(a) + SIGMA_FLOOR
    return a


def _activate_grad(tag, a, h):
    if tag == "tanh":
        return 1.0 - h * h
    if tag == "softplus":
        return sigmoid(a)
    return np.ones_like(a)


def mlp_forward(p: MlpParams, x):
    """Forward pass over a vector or a batch ``[B, in]``; returns (output, cache)."""
    x = np.asarray(x)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[-1] != p.n_in:
        raise ShapeError(f"input has {h.shape[-1]} features, network expects {p.n_in}")
    layers = []
    last = len(p.weights) - 1
    for i, (w, b, tag) in enumerate(zip(p.weights, p.biases, p.activations)):
        a = h @ w.T + b
        out = _activate(tag, a)
        if i == last and p.softplus_from is not None:
            out = out.copy() if out is a else out
            out[:, p.softplus_from:] = softplus(a[:, p.softplus_from:]) + SIGMA_FLOOR
        layers.append((h, a, out))
        h = out
    cache = {"layers": layers, "single": single}
    return (h[0] if single else h), cache


def mlp_backward(p: MlpParams, cache, output_grad):
    """Reverse pass; returns (GradientBundle summed over the batch, input gradient)."""
    layers = cache["layers"]
    if len(layers) != len(p.weights):
        raise ShapeError("cache does not match network depth")
    g = np.asarray(output_grad)
    g = g[None, :] if cache["single"] else g
    if g.shape != layers[-1][2].shape:
        raise ShapeError(f"output gradient shape {g.shape} != output {layers[-1][2].shape}")
    gw, gb = [None] * len(layers), [None] * len(layers)
    last = len(layers) - 1
    for i in range(last, -1, -1):
        h_in, a, out = layers[i]
        if h_in.shape[-1] != p.weights[i].shape[1]:
            raise ShapeError(f"stale cache at layer {i}")
        d = _activate_grad(p.activations[i], a, out)
        if i == last and p.softplus_from is not None:
            d = d.copy()
            d[:, p.softplus_from:] = sigmoid(a[:, p.softplus_from:])
        da = g * d
        gw[i] = da.T @ h_in
        gb[i] = da.sum(axis=0)
        g = da @ p.weights[i]
    grads = MlpParams(gw, gb, list(p.activations), p.softplus_from)
    return grads, (g[0] if cache["single"] else g)


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    kind: str = "adam"
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _as_named(p):
    return p.named() if isinstance(p, MlpParams) else p


def adam_update(state: OptimizerState, params, grads):
    """Bias-corrected Adam step (or plain SGD when ``state.kind == 'sgd'``).

    ``params``/``grads`` are ``MlpParams`` or dicts of named arrays; the result has
    the same type as ``params``. The input state is not modified.
    """
    named_p, named_g = _as_named(params), _as_named(grads)
    if named_p.keys() != named_g.keys():
        raise ShapeError("parameter and gradient names differ")
    for name, g in named_g.items():
        if g.shape != named_p[name].shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != {named_p[name].shape}")
        if not np.all(np.isfinite(g)):
            raise ExplodedError(f"exploded: non-finite gradient in {name}")
    t = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    for name, w in named_p.items():
        g = named_g[name]
        if state.kind == "sgd":
            new_p[name] = w - state.lr * g
            continue
        m = state.beta1 * state.m.get(name, 0.0) + (1 - state.beta1) * g
        v = state.beta2 * state.v.get(name, 0.0) + (1 - state.beta2) * g * g
        mhat = m / (1 - state.beta1 ** t)
        vhat = v / (1 - state.beta2 ** t)
        new_p[name] = w - state.lr * mhat / (np.sqrt(vhat) + state.eps)
        if state.weight_decay and name.endswith("weight"):
            new_p[name] = new_p[name] - state.lr * state.weight_decay * w
        new_m[name], new_v[name] = m, v
    new_state = OptimizerState(state.lr, state.beta1, state.beta2, state.eps, state.kind, state.weight_decay,
                               t, new_m, new_v)
    if isinstance(params, MlpParams):
        return params.with_named(new_p), new_state
    return new_p, new_state


# ---------------------------------------------------------------- file format
#
# header line  b"TRAJVAE-PARAMS <version>\n"
# manifest     one line of JSON: {"tensors": [[name, shape], ...], ...}
# payload      little-endian float64, tensors in manifest order


def write_params(path, tensors: dict[str, np.ndarray], manifest: dict | None = None) -> None:
    meta = dict(manifest or {})
    meta["tensors"] = [[name, list(np.shape(a))] for name, a in tensors.items()]
    with open(path, "wb") as fh:
        fh.write(FORMAT_MAGIC + b" " + str(FORMAT_VERSION).encode() + b"\n")
        fh.write(json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n")
        for a in tensors.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_params(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        head, rest = blob.split(b"\n", 1)
        magic, version = head.split(b" ")
        if magic != FORMAT_MAGIC:
            raise ValueError
        version = int(version)
    except ValueError:
        raise FormatError("not a parameter file: missing manifest version header") from None
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported manifest version {version} (expected {FORMAT_VERSION})")
    try:
        line, payload = rest.split(b"\n", 1)
        meta = json.loads(line.decode("utf-8"))
        specs = meta.pop("tensors")
    except (ValueError, KeyError, UnicodeDecodeError):
        raise FormatError(f"corrupt manifest (version {version})") from None
    tensors, offset = {}, 0
    for name, shape in specs:
        n = int(np.prod(shape)) * 8
        if offset + n > len(payload):
            raise FormatError(f"truncated payload at tensor {name} (manifest version {version})")
        tensors[name] = np.frombuffer(payload[offset:offset + n], dtype="<f8").astype(float).reshape(shape)
        offset += n
    if offset != len(payload):
        raise FormatError(f"payload size mismatch (manifest version {version})")
    return tensors, meta


def save_mlp(path, p: MlpParams) -> None:
    write_params(path, p.named(), {"mlp": p.manifest()})


def load_mlp(path) -> MlpParams:
    tensors, meta = read_params(path)
    return mlp_from_tensors(tensors, meta["mlp"])


def mlp_from_tensors(tensors: dict, manifest: dict, prefix: str = "") -> MlpParams:
    n = len(manifest["activations"])
    p = MlpParams(
        [tensors[f"{prefix}layer{i}.weight"] for i in range(n)],
        [tensors[f"{prefix}layer{i}.bias"] for i in range(n)],
        list(manifest["activations"]),
        manifest.get("softplus_from"),
    )
    if p.sizes != list(manifest["sizes"]):
        raise FormatError("layer shapes disagree with manifest")
    return p

