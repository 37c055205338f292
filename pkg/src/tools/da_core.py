"""
Base domain-adaptation objectives (DANN, MCD one-step and multi-step, MME)
as differentiable losses and as momentum-SGD update steps.

Adversarial terms route F's features through grad_reverse with coefficient 1
and are weighted once by lambda in value, so the adversary (D, the heads)
descends on +lambda * L_a while F receives -lambda * dL_a:
  dann  L_a = BCE of D on source (label 1) and target (label 0) features
  mcd   L_a = -discrepancy(C0, C1) on target features
  mme   L_a = -entropy(C0) on target features
"""

from typing import NamedTuple, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.state import Architecture, DaMethod
from src.tools.autodiff import Tape
from src.tools.domains import DomainDataset
from src.tools.errors import ContractViolation, NumericFailure
from src.tools.models import (
    ParamNodes,
    ParamSet,
    bind_params,
    classify,
    discriminate,
    features,
    group_mask,
    param_count,
    unflatten,
    value_and_grad,
)

SOURCE_DOMAIN_LABEL = 1.0
TARGET_DOMAIN_LABEL = 0.0


class SgdState(BaseModel):
    """Momentum SGD: v <- mu * v + g ; theta <- theta - alpha * v."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    learning_rate: float = Field(ge=0)
    momentum: float = Field(default=0.0, ge=0, lt=1)
    velocity: np.ndarray

    @classmethod
    def fresh(cls, params: ParamSet, learning_rate: float, momentum: float = 0.0) -> "SgdState":
        return cls(learning_rate=learning_rate, momentum=momentum, velocity=np.zeros(param_count(params.arch)))

    def step(self, params: ParamSet, grad: np.ndarray, mask: Optional[np.ndarray] = None):
        """Returns (new params, new state). Coordinates outside `mask` stay bitwise unchanged."""
        if self.velocity.shape != grad.shape:
            raise ContractViolation(f"velocity length {self.velocity.shape[0]} != gradient length {grad.shape[0]}")
        theta = params.flatten()
        velocity = self.velocity.copy()
        if mask is None:
            velocity = self.momentum * velocity + grad
            theta = theta - self.learning_rate * velocity
        else:
            velocity[mask] = self.momentum * velocity[mask] + grad[mask]
            theta[mask] = theta[mask] - self.learning_rate * velocity[mask]
        state = SgdState(learning_rate=self.learning_rate, momentum=self.momentum, velocity=velocity)
        return unflatten(theta, params.arch), state


class DaBatch(NamedTuple):
    """One step's data: labeled source, unlabeled target, optional labeled target (SSDA)."""
    src: DomainDataset
    tgt: DomainDataset
    tgt_labeled: Optional[DomainDataset] = None


class LossTerms(NamedTuple):
    total: int
    sup: int
    adapt: int


class StepResult(NamedTuple):
    params: ParamSet
    opt: SgdState
    sup: float
    adapt: float


def _check_batch(method: DaMethod, arch: Architecture, batch: DaBatch):
    if batch.src.n == 0 or batch.tgt.n == 0:
        raise ContractViolation("source and target batches must be non-empty")
    if batch.src.y is None:
        raise ContractViolation(f"source batch {batch.src.domain_tag} has no labels")
    if batch.tgt.labeled:
        raise ContractViolation(f"target batch {batch.tgt.domain_tag} must be an unlabeled view")
    if batch.tgt_labeled is not None and (batch.tgt_labeled.n == 0 or batch.tgt_labeled.y is None):
        raise ContractViolation("labeled target batch must be non-empty and labeled")
    if method.is_mcd and arch.num_classifiers != 2:
        raise ContractViolation(f"{method.kind} needs num_classifiers=2, architecture has {arch.num_classifiers}")


def supervised_loss(tape: Tape, nodes: ParamNodes, arch: Architecture, data: DomainDataset) -> int:
    """Cross-entropy summed over every classifier head."""
    feat = features(tape, nodes, arch, tape.constant(data.x))
    loss = None
    for head in range(arch.num_classifiers):
        ce = tape.softmax_cross_entropy(classify(tape, nodes, arch, feat, head), data.y)
        loss = ce if loss is None else tape.add(loss, ce)
    return loss


def _labeled_loss(tape, nodes, arch, batch: DaBatch, feat_src: int) -> int:
    loss = None
    for head in range(arch.num_classifiers):
        ce = tape.softmax_cross_entropy(classify(tape, nodes, arch, feat_src, head), batch.src.y)
        loss = ce if loss is None else tape.add(loss, ce)
    if batch.tgt_labeled is not None:
        loss = tape.add(loss, supervised_loss(tape, nodes, arch, batch.tgt_labeled))
    return loss


def adaptation_term(tape: Tape, nodes: ParamNodes, arch: Architecture, method: DaMethod,
                    feat_src: int, feat_tgt: int, reverse: bool = True) -> int:
    """Unweighted L_a. With reverse=False the features feed the adversary directly."""
    def through(feat):
        return tape.grad_reverse(feat, 1.0) if reverse else feat

    if method.kind == "dann":
        d_src = discriminate(tape, nodes, arch, through(feat_src))
        d_tgt = discriminate(tape, nodes, arch, through(feat_tgt))
        bce = tape.add(
            tape.sigmoid_cross_entropy(d_src, SOURCE_DOMAIN_LABEL),
            tape.sigmoid_cross_entropy(d_tgt, TARGET_DOMAIN_LABEL),
        )
        return tape.scale(bce, 0.5)
    if method.is_mcd:
        feat = through(feat_tgt)
        disc = tape.l1_discrepancy(classify(tape, nodes, arch, feat, 0), classify(tape, nodes, arch, feat, 1))
        return tape.scale(disc, -1.0)
    if method.kind == "mme":
        ent = tape.entropy(classify(tape, nodes, arch, through(feat_tgt), 0))
        return tape.scale(ent, -1.0)
    raise ContractViolation(f"Unknown method {method.kind}")


def build_da_loss(tape: Tape, nodes: ParamNodes, arch: Architecture, method: DaMethod, batch: DaBatch) -> LossTerms:
    """L_sup(src [+ labeled tgt]) + lambda * L_a(src, tgt)."""
    feat_src = features(tape, nodes, arch, tape.constant(batch.src.x))
    feat_tgt = features(tape, nodes, arch, tape.constant(batch.tgt.x))
    sup = _labeled_loss(tape, nodes, arch, batch, feat_src)
    adapt = adaptation_term(tape, nodes, arch, method, feat_src, feat_tgt)
    total = tape.add(sup, tape.scale(adapt, method.lam))
    return LossTerms(total, sup, adapt)


def uda_loss(method: DaMethod, params: ParamSet, arch: Architecture,
             src_batch: DomainDataset, tgt_batch: DomainDataset):
    """Returns (tape, loss node) for L_sup(src) + lambda * L_a(src, tgt) on a fresh tape."""
    batch = DaBatch(src_batch, tgt_batch)
    _check_batch(method, arch, batch)
    tape = Tape()
    nodes = bind_params(tape, params)
    terms = build_da_loss(tape, nodes, arch, method, batch)
    return tape, terms.total


def _grad(params: ParamSet, method: DaMethod, build):
    captured = {}

    def wrapped(tape, nodes):
        captured["terms"] = terms = build(tape, nodes)
        return terms.total if isinstance(terms, LossTerms) else terms

    try:
        result = value_and_grad(params, wrapped)
    except NumericFailure as e:
        raise NumericFailure(str(e), where=method.kind) from e
    if not np.all(np.isfinite(result.grad)):
        raise NumericFailure("Non-finite gradient", where=method.kind)
    terms = captured["terms"]
    if isinstance(terms, LossTerms):
        return result, result.tape.scalar(terms.sup), result.tape.scalar(terms.adapt)
    return result, result.value, 0.0


def _multistep(method: DaMethod, params: ParamSet, arch: Architecture, batch: DaBatch, opt: SgdState) -> StepResult:
    """A: L_sup over F,C0,C1. B: L_sup - lambda*disc over C0,C1. C: n_steps of lambda*disc over F."""
    not_d = ~group_mask(arch, ("D.",))
    heads = group_mask(arch, ("C0.", "C1."))
    extractor = group_mask(arch, ("F.",))

    def sup_only(tape, nodes):
        feat_src = features(tape, nodes, arch, tape.constant(batch.src.x))
        return _labeled_loss(tape, nodes, arch, batch, feat_src)

    def heads_phase(tape, nodes):
        feat_src = features(tape, nodes, arch, tape.constant(batch.src.x))
        feat_tgt = features(tape, nodes, arch, tape.constant(batch.tgt.x))
        sup = _labeled_loss(tape, nodes, arch, batch, feat_src)
        adapt = adaptation_term(tape, nodes, arch, method, feat_src, feat_tgt, reverse=False)
        return LossTerms(tape.add(sup, tape.scale(adapt, method.lam)), sup, adapt)

    def extractor_phase(tape, nodes):
        feat_tgt = features(tape, nodes, arch, tape.constant(batch.tgt.x))
        disc = tape.l1_discrepancy(classify(tape, nodes, arch, feat_tgt, 0), classify(tape, nodes, arch, feat_tgt, 1))
        return tape.scale(disc, method.lam)

    result, sup, _ = _grad(params, method, sup_only)
    params, opt = opt.step(params, result.grad, not_d)
    result, _, adapt = _grad(params, method, heads_phase)
    params, opt = opt.step(params, result.grad, heads)
    for _ in range(method.n_steps):
        result, _, _ = _grad(params, method, extractor_phase)
        params, opt = opt.step(params, result.grad, extractor)
    return StepResult(params, opt, sup, adapt)


def adapt_step(method: DaMethod, params: ParamSet, arch: Architecture, batch: DaBatch, opt: SgdState) -> StepResult:
    """One DA update on a batch; returns the loss terms measured before the update."""
    _check_batch(method, arch, batch)
    if method.kind == "mcd-multistep":
        return _multistep(method, params, arch, batch, opt)
    result, sup, adapt = _grad(params, method, lambda tape, nodes: build_da_loss(tape, nodes, arch, method, batch))
    new_params, new_opt = opt.step(params, result.grad)
    return StepResult(new_params, new_opt, sup, adapt)


def supervised_step(method: DaMethod, params: ParamSet, arch: Architecture, data: DomainDataset,
                    opt: SgdState, extra: Optional[DomainDataset] = None) -> StepResult:
    """Source-only update: L_sup on `data` (plus `extra` labeled samples) with no adaptation term."""
    if data.n == 0 or data.y is None:
        raise ContractViolation("supervised step needs a non-empty labeled batch")

    def build(tape, nodes):
        loss = supervised_loss(tape, nodes, arch, data)
        if extra is not None:
            loss = tape.add(loss, supervised_loss(tape, nodes, arch, extra))
        return loss

    result, sup, _ = _grad(params, method, build)
    new_params, new_opt = opt.step(params, result.grad)
    return StepResult(new_params, new_opt, sup, 0.0)


def da_step(method: DaMethod, params: ParamSet, arch: Architecture,
            src_batch: DomainDataset, tgt_batch: DomainDataset, opt: SgdState):
    result = adapt_step(method, params, arch, DaBatch(src_batch, tgt_batch), opt)
    return result.params, result.opt


def ssda_step(method: DaMethod, params: ParamSet, arch: Architecture, src_batch: DomainDataset,
              labeled_tgt_batch: DomainDataset, unlabeled_tgt_batch: DomainDataset, opt: SgdState):
    """One step on L_sup(src) + L_sup(labeled tgt) + lambda * L_a(src, unlabeled tgt)."""
    result = adapt_step(method, params, arch, DaBatch(src_batch, unlabeled_tgt_batch, labeled_tgt_batch), opt)
    return result.params, result.opt
