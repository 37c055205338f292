"""
Reverse-mode automatic differentiation over dense float64 matrices.

A Tape records every primitive as a node whose id is its position in the
tape, so inputs always carry smaller ids than their consumers and the tape
is topologically ordered by construction. `backward` walks the tape once in
reverse and accumulates adjoints.

Every value is a 2-D float64 array; scalars are 1x1. The softmax family is
fused into its losses (cross-entropy, entropy, discrepancy) so no log is ever
taken of a probability that underflowed.
"""

from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from src.tools.errors import ContractViolation, NumericFailure

Matrix = np.ndarray
Vjp = Callable[[Matrix], Tuple[Matrix, ...]]

LOG_CLAMP = 1e-12
NORM_CLAMP = 1e-12


class Node(NamedTuple):
    """One operation record: kind, input node ids, cached forward value, vector-Jacobian product."""
    op: str
    inputs: Tuple[int, ...]
    value: Matrix
    vjp: Optional[Vjp]


def as_matrix(value) -> Matrix:
    """Coerce to a finite 2-D float64 array (vectors become single rows)."""
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ContractViolation(f"Matrix must be at most 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericFailure("Matrix entries must be finite", where="as_matrix")
    return arr


def _softmax(logits: Matrix) -> Tuple[Matrix, Matrix]:
    """Row softmax and log-softmax with max-subtraction."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    return exp / total, shifted - np.log(total)


def _softmax_vjp(probs: Matrix, grad_probs: Matrix) -> Matrix:
    return probs * (grad_probs - np.sum(grad_probs * probs, axis=1, keepdims=True))


def softmax(logits) -> Matrix:
    """Row-wise softmax of a plain array (no tape)."""
    return _softmax(as_matrix(logits))[0]


def _check_labels(labels, n_rows: int, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n_rows:
        raise ContractViolation(f"Expected {n_rows} labels, got {labels.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ContractViolation(f"Labels must lie in [0, {n_classes}), got range [{labels.min()}, {labels.max()}]")
    return labels


class Tape:
    """Single-owner record of a differentiable computation."""

    def __init__(self):
        self.nodes: List[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, op: str, inputs: Sequence[int], value: Matrix, vjp: Optional[Vjp]) -> int:
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise ContractViolation(f"Unknown input node {i} for op {op}")
        self.nodes.append(Node(op, tuple(inputs), value, vjp))
        return len(self.nodes) - 1

    def value(self, node: int) -> Matrix:
        return self.nodes[node].value

    def scalar(self, node: int) -> float:
        value = self.nodes[node].value
        if value.shape != (1, 1):
            raise ContractViolation(f"Node {node} is not scalar, shape {value.shape}")
        return float(value[0, 0])

    def shape(self, node: int) -> Tuple[int, int]:
        return self.nodes[node].value.shape

    # --- Leaves ---

    def leaf(self, value, op: str = "leaf") -> int:
        return self._push(op, (), as_matrix(value), None)

    def constant(self, value) -> int:
        return self.leaf(value, op="constant")

    # --- Linear algebra ---

    def matmul(self, a: int, b: int) -> int:
        av, bv = self.value(a), self.value(b)
        if av.shape[1] != bv.shape[0]:
            raise ContractViolation(f"matmul shape mismatch {av.shape} @ {bv.shape}")
        return self._push("matmul", (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))

    def add_bias(self, x: int, bias: int) -> int:
        xv, bv = self.value(x), self.value(bias)
        if bv.shape != (1, xv.shape[1]):
            raise ContractViolation(f"add_bias expects bias of shape (1, {xv.shape[1]}), got {bv.shape}")
        return self._push("add_bias", (x, bias), xv + bv, lambda g: (g, g.sum(axis=0, keepdims=True)))

    def add(self, a: int, b: int) -> int:
        av, bv = self.value(a), self.value(b)
        if av.shape != bv.shape:
            raise ContractViolation(f"add shape mismatch {av.shape} vs {bv.shape}")
        return self._push("add", (a, b), av + bv, lambda g: (g, g))

    def mul(self, a: int, b: int) -> int:
        av, bv = self.value(a), self.value(b)
        if av.shape != bv.shape:
            raise ContractViolation(f"mul shape mismatch {av.shape} vs {bv.shape}")
        return self._push("mul", (a, b), av * bv, lambda g: (g * bv, g * av))

    def scale(self, x: int, c: float) -> int:
        c = float(c)
        return self._push("scale", (x,), self.value(x) * c, lambda g: (g * c,))

    def relu(self, x: int) -> int:
        xv = self.value(x)
        mask = xv > 0
        return self._push("relu", (x,), np.where(mask, xv, 0.0), lambda g: (g * mask,))

    def sum(self, x: int) -> int:
        xv = self.value(x)
        return self._push("sum", (x,), xv.sum().reshape(1, 1), lambda g: (np.full_like(xv, g[0, 0]),))

    def mean(self, x: int) -> int:
        xv = self.value(x)
        if xv.size == 0:
            raise ContractViolation("mean of an empty matrix")
        size = xv.size
        return self._push("mean", (x,), xv.mean().reshape(1, 1), lambda g: (np.full_like(xv, g[0, 0] / size),))

    def l2_normalize(self, x: int, axis: int = 1) -> int:
        """Unit-normalise rows (axis=1) or columns (axis=0); norms are clamped at NORM_CLAMP."""
        xv = self.value(x)
        raw = np.sqrt(np.sum(xv * xv, axis=axis, keepdims=True))
        norms = np.maximum(raw, NORM_CLAMP)
        out = xv / norms
        clamped = raw < NORM_CLAMP

        def vjp(g):
            projected = g - out * np.sum(g * out, axis=axis, keepdims=True)
            return (np.where(clamped, g, projected) / norms,)

        return self._push("l2_normalize", (x,), out, vjp)

    def grad_reverse(self, x: int, lam: float) -> int:
        """Identity forward (the very same array); backward multiplies the adjoint by -lam."""
        lam = float(lam)
        if lam < 0:
            raise ContractViolation(f"grad_reverse coefficient must be >= 0, got {lam}")
        return self._push("grad_reverse", (x,), self.value(x), lambda g: (g * -lam,))

    # --- Fused losses ---

    def softmax_cross_entropy(self, logits: int, labels) -> int:
        zv = self.value(logits)
        n, k = zv.shape
        if n == 0:
            raise ContractViolation("softmax_cross_entropy on an empty batch")
        labels = _check_labels(labels, n, k)
        probs, log_probs = _softmax(zv)
        rows = np.arange(n)
        loss = -log_probs[rows, labels].mean()
        onehot = np.zeros_like(zv)
        onehot[rows, labels] = 1.0

        def vjp(g):
            return ((probs - onehot) * (g[0, 0] / n),)

        return self._push("softmax_cross_entropy", (logits,), np.array([[max(loss, 0.0)]]), vjp)

    def sigmoid_cross_entropy(self, logits: int, targets) -> int:
        """Binary cross-entropy on an n x 1 logit column against 0/1 targets (softplus form)."""
        zv = self.value(logits)
        if zv.ndim != 2 or zv.shape[1] != 1 or zv.shape[0] == 0:
            raise ContractViolation(f"sigmoid_cross_entropy expects a non-empty n x 1 column, got {zv.shape}")
        t = np.asarray(targets, dtype=np.float64).reshape(-1, 1)
        if t.shape != zv.shape:
            t = np.broadcast_to(t, zv.shape)
        n = zv.shape[0]
        per_row = np.maximum(zv, 0.0) - zv * t + np.log1p(np.exp(-np.abs(zv)))
        sig = 1.0 / (1.0 + np.exp(-zv))

        def vjp(g):
            return ((sig - t) * (g[0, 0] / n),)

        return self._push("sigmoid_cross_entropy", (logits,), per_row.mean().reshape(1, 1), vjp)

    def entropy(self, logits: int) -> int:
        """Mean over rows of the Shannon entropy of softmax(row)."""
        zv = self.value(logits)
        n, k = zv.shape
        if k < 2:
            raise ContractViolation(f"entropy needs at least 2 classes, got {k}")
        if n == 0:
            raise ContractViolation("entropy on an empty batch")
        probs, log_probs = _softmax(zv)
        log_probs = np.maximum(log_probs, np.log(LOG_CLAMP))
        row_h = -np.sum(probs * log_probs, axis=1, keepdims=True)

        def vjp(g):
            return (-probs * (log_probs + row_h) * (g[0, 0] / n),)

        value = float(np.clip(row_h.mean(), 0.0, np.log(k)))
        return self._push("entropy", (logits,), np.array([[value]]), vjp)

    def l1_discrepancy(self, logits1: int, logits2: int) -> int:
        """Mean over rows of (1/K) * sum_k |softmax(row1)_k - softmax(row2)_k|."""
        z1, z2 = self.value(logits1), self.value(logits2)
        if z1.shape != z2.shape:
            raise ContractViolation(f"l1_discrepancy shape mismatch {z1.shape} vs {z2.shape}")
        n, k = z1.shape
        if n == 0:
            raise ContractViolation("l1_discrepancy on an empty batch")
        p1, _ = _softmax(z1)
        p2, _ = _softmax(z2)
        diff = p1 - p2
        value = np.abs(diff).sum(axis=1).mean() / k
        sign = np.sign(diff)

        def vjp(g):
            gp = sign * (g[0, 0] / (n * k))
            return _softmax_vjp(p1, gp), _softmax_vjp(p2, -gp)

        return self._push("l1_discrepancy", (logits1, logits2), np.array([[value]]), vjp)


def backward(tape: Tape, loss: int) -> Dict[int, Matrix]:
    """
    Reverse sweep from a scalar node. Returns an adjoint for every node of the
    tape; nodes the loss does not depend on get zeros.
    """
    if not 0 <= loss < len(tape):
        raise ContractViolation(f"Loss node {loss} not on tape")
    if tape.shape(loss) != (1, 1):
        raise ContractViolation(f"backward needs a scalar (1x1) loss, got {tape.shape(loss)}")

    adjoints: Dict[int, Matrix] = {i: np.zeros_like(node.value) for i, node in enumerate(tape.nodes)}
    adjoints[loss] = np.ones((1, 1))
    for i in range(loss, -1, -1):
        node = tape.nodes[i]
        if node.vjp is None or not node.inputs:
            continue
        g = adjoints[i]
        if not np.any(g):
            continue
        contributions = node.vjp(g)
        for parent, contrib in zip(node.inputs, contributions):
            if not np.all(np.isfinite(contrib)):
                raise NumericFailure("Non-finite adjoint during backward", where=f"{node.op}#{i}")
            adjoints[parent] = adjoints[parent] + contrib
    return adjoints
