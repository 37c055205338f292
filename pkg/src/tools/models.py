"""
MLP feature extractor F, classifier heads C0/C1 and domain discriminator D,
with a fixed bijection between a ParamSet and one flat float64 vector.

Flatten order: F layers in depth order, then classifier heads by index, then
D (hidden layers, then the output layer); inside every layer the weight comes
before the bias. Normalized-with-temperature heads carry no bias.
"""

import json
import struct
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from src.state import Architecture, InitScheme
from src.tools.autodiff import Tape, backward
from src.tools.errors import ContractViolation, NumericFailure

PARAMS_MAGIC = b"METADAP1"

ParamNodes = Dict[str, int]
LossBuilder = Callable[[Tape, ParamNodes], int]


class TensorSlot(NamedTuple):
    name: str
    shape: Tuple[int, int]


def param_layout(arch: Architecture) -> List[TensorSlot]:
    """Names and shapes of every tensor, in flatten order."""
    slots: List[TensorSlot] = []
    width = arch.input_dim
    for i, out in enumerate(arch.feature_dims):
        slots += [TensorSlot(f"F.{i}.W", (width, out)), TensorSlot(f"F.{i}.b", (1, out))]
        width = out
    for h in range(arch.num_classifiers):
        slots.append(TensorSlot(f"C{h}.W", (width, arch.num_classes)))
        if arch.classifier_kind == "plain-linear":
            slots.append(TensorSlot(f"C{h}.b", (1, arch.num_classes)))
    d_width = width
    for i, out in enumerate(arch.discriminator_dims):
        slots += [TensorSlot(f"D.{i}.W", (d_width, out)), TensorSlot(f"D.{i}.b", (1, out))]
        d_width = out
    slots += [TensorSlot("D.out.W", (d_width, 1)), TensorSlot("D.out.b", (1, 1))]
    return slots


def param_count(arch: Architecture) -> int:
    return sum(rows * cols for _, (rows, cols) in param_layout(arch))


class ParamSet(BaseModel):
    """Value type holding every tensor of one model. Copy before mutating."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    arch: Architecture
    tensors: Dict[str, np.ndarray]

    def copy(self) -> "ParamSet":
        return ParamSet(arch=self.arch, tensors={k: v.copy() for k, v in self.tensors.items()})

    def flatten(self) -> np.ndarray:
        return flatten(self)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]


def flatten(params: ParamSet) -> np.ndarray:
    return np.concatenate([params.tensors[name].ravel() for name, _ in param_layout(params.arch)])


def unflatten(vector, arch: Architecture) -> ParamSet:
    vector = np.asarray(vector, dtype=np.float64).reshape(-1)
    expected = param_count(arch)
    if vector.shape[0] != expected:
        raise ContractViolation(f"Parameter vector has length {vector.shape[0]}, architecture needs {expected}")
    tensors = {}
    offset = 0
    for name, (rows, cols) in param_layout(arch):
        size = rows * cols
        tensors[name] = vector[offset:offset + size].reshape(rows, cols).copy()
        offset += size
    return ParamSet(arch=arch, tensors=tensors)


def group_mask(arch: Architecture, prefixes: Tuple[str, ...]) -> np.ndarray:
    """Boolean mask over the flat vector selecting tensors whose name starts with one of the prefixes."""
    parts = [np.full(rows * cols, name.startswith(prefixes)) for name, (rows, cols) in param_layout(arch)]
    return np.concatenate(parts)


def _draw_weight(rng: np.random.Generator, kind: str, shape: Tuple[int, int]) -> np.ndarray:
    fan_in, fan_out = shape
    if kind == "kaiming-uniform":
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)
    if kind == "kaiming-normal":
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    if kind == "xavier-uniform":
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=shape)
    if kind == "xavier-normal":
        return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=shape)
    raise ContractViolation(f"Unknown init scheme {kind}")


def init_params(arch: Architecture, scheme: InitScheme, seed: int) -> ParamSet:
    """Fan-in/fan-out scaled weights, zero biases, then optional Gaussian weight perturbation."""
    weight_seq, noise_seq = np.random.SeedSequence(seed).spawn(2)
    weight_rng, noise_rng = np.random.default_rng(weight_seq), np.random.default_rng(noise_seq)
    tensors = {}
    for name, shape in param_layout(arch):
        if name.endswith(".W"):
            tensors[name] = _draw_weight(weight_rng, scheme.kind, shape)
        else:
            tensors[name] = np.zeros(shape)
    if scheme.perturb_sigma > 0:
        for name, shape in param_layout(arch):
            if name.endswith(".W"):
                tensors[name] = tensors[name] + noise_rng.normal(0.0, scheme.perturb_sigma, size=shape)
    return ParamSet(arch=arch, tensors=tensors)


# --- Graph construction ---

def bind_params(tape: Tape, params: ParamSet) -> ParamNodes:
    return {name: tape.leaf(params.tensors[name]) for name, _ in param_layout(params.arch)}


def features(tape: Tape, nodes: ParamNodes, arch: Architecture, x: int) -> int:
    h = x
    for i in range(len(arch.feature_dims)):
        h = tape.relu(tape.add_bias(tape.matmul(h, nodes[f"F.{i}.W"]), nodes[f"F.{i}.b"]))
    return h


def classify(tape: Tape, nodes: ParamNodes, arch: Architecture, feat: int, head: int) -> int:
    if not 0 <= head < arch.num_classifiers:
        raise ContractViolation(f"Classifier head {head} out of range for {arch.num_classifiers} head(s)")
    weight = nodes[f"C{head}.W"]
    if arch.classifier_kind == "normalized-with-temperature":
        cosine = tape.matmul(tape.l2_normalize(feat, axis=1), tape.l2_normalize(weight, axis=0))
        return tape.scale(cosine, 1.0 / arch.temperature)
    return tape.add_bias(tape.matmul(feat, weight), nodes[f"C{head}.b"])


def discriminate(tape: Tape, nodes: ParamNodes, arch: Architecture, feat: int) -> int:
    h = feat
    for i in range(len(arch.discriminator_dims)):
        h = tape.relu(tape.add_bias(tape.matmul(h, nodes[f"D.{i}.W"]), nodes[f"D.{i}.b"]))
    return tape.add_bias(tape.matmul(h, nodes["D.out.W"]), nodes["D.out.b"])


def _check_input(arch: Architecture, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != arch.input_dim:
        raise ContractViolation(f"Input must be n x {arch.input_dim}, got shape {x.shape}")
    return x


def predict(params: ParamSet, arch: Architecture, x, head: int = 0) -> np.ndarray:
    """Logits C_head(F(x)) as an n x K array."""
    x = _check_input(arch, x)
    tape = Tape()
    nodes = bind_params(tape, params)
    feat = features(tape, nodes, arch, tape.constant(x))
    return tape.value(classify(tape, nodes, arch, feat, head))


def accuracy(params: ParamSet, arch: Architecture, dataset, head: int = 0) -> float:
    """Fraction of samples whose argmax logit (lowest index on ties) equals the label."""
    if dataset.y is None:
        raise ContractViolation(f"Dataset {dataset.domain_tag} carries no labels")
    if dataset.n == 0:
        raise ContractViolation("accuracy of an empty dataset")
    logits = predict(params, arch, dataset.x, head)
    return float(np.mean(np.argmax(logits, axis=1) == dataset.y))


class LossGrad(NamedTuple):
    tape: Tape
    loss: int
    value: float
    grad: np.ndarray


def value_and_grad(params: ParamSet, build: LossBuilder) -> LossGrad:
    """Build a loss on a fresh tape and return its value with the flat gradient over all parameters."""
    tape = Tape()
    nodes = bind_params(tape, params)
    loss = build(tape, nodes)
    value = tape.scalar(loss)
    if not np.isfinite(value):
        raise NumericFailure("Non-finite loss value", where=tape.nodes[loss].op)
    adjoints = backward(tape, loss)
    grad = np.concatenate([adjoints[nodes[name]].ravel() for name, _ in param_layout(params.arch)])
    return LossGrad(tape, loss, value, grad)


def loss_value(params: ParamSet, build: LossBuilder) -> float:
    tape = Tape()
    nodes = bind_params(tape, params)
    return tape.scalar(build(tape, nodes))


# --- Serialization ---

def save_params(path, params: ParamSet) -> Path:
    """Binary layout: magic, u32 header length, JSON architecture, u64 count, little-endian float64s."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = params.arch.model_dump_json().encode("utf-8")
    vector = flatten(params)
    with open(path, "wb") as f:
        f.write(PARAMS_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(struct.pack("<Q", vector.shape[0]))
        f.write(vector.astype("<f8").tobytes())
    return path


def load_params(path) -> ParamSet:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:len(PARAMS_MAGIC)] != PARAMS_MAGIC:
        raise ContractViolation(f"{path} is not a parameter file")
    offset = len(PARAMS_MAGIC)
    (header_len,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    arch = Architecture.model_validate(json.loads(blob[offset:offset + header_len].decode("utf-8")))
    offset += header_len
    (count,) = struct.unpack_from("<Q", blob, offset)
    offset += 8
    vector = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(np.float64)
    return unflatten(vector, arch)
