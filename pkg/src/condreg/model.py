"""Feed-forward encoder, main classifier and adversary head with hand-written
forward and backward passes.

Weights are stored as ``(in, out)`` matrices so a layer computes ``x @ W + b``
on a batch of row vectors.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from condreg.errors import ParseError, ShapeError
from condreg.numerics import as_matrix

DEFAULT_SLOPE = 0.01
_MAGIC = b"CRCK"
_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths from input to output; hidden layers use LeakyReLU."""

    widths: tuple
    slope: float = DEFAULT_SLOPE

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        if len(widths) < 2:
            raise ValueError("an MLP needs at least an input and an output width")
        if any(w <= 0 for w in widths):
            raise ValueError("layer widths must be positive")
        object.__setattr__(self, "widths", widths)

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def shapes(self) -> list:
        out = []
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            out += [(fan_in, fan_out), (fan_out,)]
        return out

    def to_dict(self) -> dict:
        return {"widths": list(self.widths), "slope": self.slope}


@dataclass
class Mlp:
    spec: MlpSpec
    weights: list  # [W0, b0, W1, b1, ...]

    def __post_init__(self):
        if [w.shape for w in self.weights] != self.spec.shapes:
            raise ShapeError("weights do not match the layer spec")

    def copy(self) -> "Mlp":
        return Mlp(self.spec, [w.copy() for w in self.weights])


@dataclass
class ForwardTape:
    inputs: list = field(default_factory=list)  # input to each layer
    preacts: list = field(default_factory=list)  # x @ W + b per layer


def init_mlp(spec: MlpSpec, rng: np.random.Generator) -> Mlp:
    """Kaiming-normal weights for LeakyReLU, zero biases."""
    weights = []
    gain = np.sqrt(2.0 / (1.0 + spec.slope**2))
    for fan_in, fan_out in zip(spec.widths[:-1], spec.widths[1:]):
        weights.append(rng.normal(0.0, gain / np.sqrt(fan_in), size=(fan_in, fan_out)))
        weights.append(np.zeros(fan_out))
    return Mlp(spec, weights)


def identity_mlp(dim: int) -> Mlp:
    return Mlp(MlpSpec((dim, dim)), [np.eye(dim), np.zeros(dim)])


def _leaky(x, slope):
    return np.where(x > 0, x, slope * x)


def mlp_forward(net: Mlp, x) -> tuple[np.ndarray, ForwardTape]:
    x = as_matrix(x, "x")
    if x.shape[1] != net.spec.widths[0]:
        raise ShapeError(f"expected {net.spec.widths[0]} input columns, got {x.shape[1]}")
    tape = ForwardTape()
    h = x
    last = net.spec.n_layers - 1
    for layer in range(net.spec.n_layers):
        w, b = net.weights[2 * layer], net.weights[2 * layer + 1]
        tape.inputs.append(h)
        pre = h @ w + b
        tape.preacts.append(pre)
        h = pre if layer == last else _leaky(pre, net.spec.slope)
    return h, tape


def mlp_backward(net: Mlp, tape: ForwardTape, upstream) -> tuple[list, np.ndarray]:
    """Reverse pass for the scalar ``<upstream, output>``.

    Returns gradients aligned with ``net.weights`` and the input gradient.
    """
    if len(tape.inputs) != net.spec.n_layers:
        raise ShapeError("tape does not belong to this network")
    delta = np.asarray(upstream, dtype=np.float64)
    if delta.shape != tape.preacts[-1].shape:
        raise ShapeError(f"upstream shape {delta.shape} != output {tape.preacts[-1].shape}")
    grads = [None] * len(net.weights)
    for layer in reversed(range(net.spec.n_layers)):
        if layer != net.spec.n_layers - 1:
            delta = delta * np.where(tape.preacts[layer] > 0, 1.0, net.spec.slope)
        grads[2 * layer] = tape.inputs[layer].T @ delta
        grads[2 * layer + 1] = delta.sum(axis=0)
        delta = delta @ net.weights[2 * layer].T
    return grads, delta


@dataclass
class ModelParams:
    """Encoder (theta), main classifier (phi) and optional adversary (psi)."""

    encoder: Mlp
    classifier: Mlp
    adversary: Optional[Mlp] = None

    def __post_init__(self):
        d = self.encoder.spec.widths[-1]
        if self.classifier.spec.widths[0] != d:
            raise ShapeError("classifier input width must equal encoder output width")
        if self.adversary is not None and self.adversary.spec.widths[0] != d:
            raise ShapeError("adversary input width must equal encoder output width")

    @property
    def nets(self) -> list:
        return [n for n in (self.encoder, self.classifier, self.adversary) if n is not None]

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.encoder.copy(),
            self.classifier.copy(),
            None if self.adversary is None else self.adversary.copy(),
        )


def build_model(
    d_in: int,
    hidden: tuple = (32,),
    d_out: int = 8,
    classifier_hidden: tuple = (),
    adversary_hidden: Optional[tuple] = None,
    slope: float = DEFAULT_SLOPE,
    rng: Optional[np.random.Generator] = None,
) -> ModelParams:
    """Randomly initialized encoder + two-class heads.

    ``adversary_hidden=None`` builds no adversary head.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    enc = init_mlp(MlpSpec((d_in, *hidden, d_out), slope), rng)
    clf = init_mlp(MlpSpec((d_out, *classifier_hidden, 2), slope), rng)
    adv = None
    if adversary_hidden is not None:
        adv = init_mlp(MlpSpec((d_out, *adversary_hidden, 2), slope), rng)
    return ModelParams(enc, clf, adv)


def encode(params: ModelParams, x) -> tuple[np.ndarray, ForwardTape]:
    return mlp_forward(params.encoder, x)


def backward(params: ModelParams, tape: ForwardTape, upstream) -> tuple[list, np.ndarray]:
    return mlp_backward(params.encoder, tape, upstream)


def cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-softmax of the true class and its logit gradient."""
    logits = as_matrix(logits, "logits")
    labels = np.asarray(labels).reshape(-1).astype(np.int64)
    if logits.shape[0] != labels.size:
        raise ShapeError(f"{logits.shape[0]} logit rows vs {labels.size} labels")
    n = labels.size
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_norm[:, None]
    rows = np.arange(n)
    loss = -log_probs[rows, labels].mean()
    dlogits = np.exp(log_probs)
    dlogits[rows, labels] -= 1.0
    return float(loss), dlogits / n


def accuracy(logits, labels) -> float:
    """Fraction of rows whose argmax matches the label; ties go to class 0."""
    logits = np.asarray(logits)
    labels = np.asarray(labels).reshape(-1)
    if len(labels) == 0:
        return 0.0
    return float(np.mean(np.argmax(logits, axis=1) == labels))


# ---------------------------------------------------------- flat-vector view


def flatten(arrays) -> np.ndarray:
    return np.concatenate([np.ravel(a) for a in arrays]) if arrays else np.zeros(0)


def unflatten(vec, shapes) -> list:
    out, pos = [], 0
    for shape in shapes:
        size = int(np.prod(shape))
        out.append(np.array(vec[pos : pos + size]).reshape(shape))
        pos += size
    if pos != len(vec):
        raise ShapeError(f"vector of length {len(vec)} does not match shapes ({pos})")
    return out


# ---------------------------------------------------------------- checkpoints
#
# Layout: b"CRCK", uint32 version, uint32 header length, UTF-8 JSON header
# {"nets": {"encoder": {"widths": [...], "slope": s}, "classifier": ..., ...}},
# then every net's parameters in header order, layer by layer (W then b),
# row-major little-endian float64.


def save_checkpoint(params: ModelParams, path) -> Path:
    path = Path(path)
    nets = {"encoder": params.encoder, "classifier": params.classifier}
    if params.adversary is not None:
        nets["adversary"] = params.adversary
    header = json.dumps({"nets": {k: v.spec.to_dict() for k, v in nets.items()}}).encode()
    body = flatten([w for net in nets.values() for w in net.weights])
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<II", _VERSION, len(header)) + header)
        fh.write(body.astype("<f8").tobytes())
    return path


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ParseError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != _VERSION:
        raise ParseError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[12 : 12 + hlen].decode())
    body = np.frombuffer(raw[12 + hlen :], dtype="<f8").astype(np.float64)
    nets, pos = {}, 0
    for name, spec_d in header["nets"].items():
        spec = MlpSpec(tuple(spec_d["widths"]), spec_d["slope"])
        size = sum(int(np.prod(s)) for s in spec.shapes)
        if pos + size > body.size:
            raise ParseError(f"{path} is truncated")
        nets[name] = Mlp(spec, unflatten(body[pos : pos + size], spec.shapes))
        pos += size
    if pos != body.size:
        raise ParseError(f"{path} has trailing data")
    return ModelParams(nets["encoder"], nets["classifier"], nets.get("adversary"))
