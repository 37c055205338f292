"""
Meta-learning of DA initial conditions.

UpdateIC copies Theta_0, runs J plain-SGD steps of the base DA objective on
the copy, and moves Theta_0 along the supervised validation gradient taken at
the end of that rollout. The shortest-path form gets there through
Theta_0 - (Theta_0 - Theta_J); the first-order form evaluates at Theta_J
directly. Both agree to rounding error, which is what makes the rollout free
of any second-order terms.

The trainers interleave one UpdateIC with S DA steps (online), front-load all
UpdateIC calls (sequential), or skip them (vanilla / source-only).
"""

import logging
import time
from typing import Callable, Dict, List, NamedTuple, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from src.state import Architecture, Budget, DaMethod, LossTraces, MetaConfig, MetaMode, RunReport, TrainSettings
from src.tools.da_core import DaBatch, SgdState, adapt_step, supervised_loss, supervised_step
from src.tools.domains import BatchStream, DomainDataset, concat, sample_meta_split
from src.tools.errors import ContractViolation, NumericFailure, OracleRefused
from src.tools.models import (
    ParamSet,
    accuracy,
    group_mask,
    init_params,
    loss_value,
    param_count,
    unflatten,
    value_and_grad,
)

logger = logging.getLogger(__name__)

FD_PARAM_CAP = 200

# Stream tags keep every random consumer on its own generator, so turning
# meta-updates on or off never shifts the DA batch sequence
_SRC_STREAM, _TGT_STREAM, _META_STREAM, _META_SRC_STREAM, _META_TGT_STREAM = 1, 2, 3, 4, 5


class MetaEpisode(NamedTuple):
    """d_tr: one DaBatch per inner step (labeled meta-train + unlabeled meta-test). d_val: labeled meta-test."""
    d_tr: List[DaBatch]
    d_val: DomainDataset


def _inner_method(cfg: MetaConfig) -> DaMethod:
    if cfg.inner_method is None:
        raise ContractViolation("MetaConfig.inner_method must be set before calling UpdateIC")
    return cfg.inner_method


def _check_episode(episode: MetaEpisode):
    if episode.d_val.n == 0 or episode.d_val.y is None:
        raise ContractViolation("d_val must be a non-empty labeled batch")


def rollout(params: ParamSet, arch: Architecture, method: DaMethod, batches: List[DaBatch], alpha: float) -> ParamSet:
    """Plain gradient steps (no momentum) of the base DA objective, one per batch, on a copy."""
    current = params.copy()
    for batch in batches:
        current = adapt_step(method, current, arch, batch, SgdState.fresh(current, alpha, 0.0)).params
    return current


def outer_gradient(params: ParamSet, arch: Architecture, d_val: DomainDataset) -> np.ndarray:
    return value_and_grad(params, lambda tape, nodes: supervised_loss(tape, nodes, arch, d_val)).grad


def _meta_step(theta0: np.ndarray, grad: np.ndarray, arch: Architecture, cfg: MetaConfig) -> ParamSet:
    step = cfg.effective_meta_alpha * grad
    if cfg.update_scope == "exclude-adversary":
        step = np.where(group_mask(arch, ("D.", "C1.")), 0.0, step)
    return unflatten(theta0 - step, arch)


def update_ic_spg(params: ParamSet, arch: Architecture, episode: MetaEpisode, cfg: MetaConfig) -> ParamSet:
    """Shortest-path UpdateIC: the outer gradient is taken at Theta_0 - (Theta_0 - Theta_J)."""
    _check_episode(episode)
    theta0 = params.flatten()
    tilde = rollout(params, arch, _inner_method(cfg), episode.d_tr, cfg.alpha)
    short = theta0 - tilde.flatten()
    grad = outer_gradient(unflatten(theta0 - short, arch), arch, episode.d_val)
    return _meta_step(theta0, grad, arch, cfg)


def update_ic_firstorder(params: ParamSet, arch: Architecture, episode: MetaEpisode, cfg: MetaConfig) -> ParamSet:
    """First-order UpdateIC: the outer gradient is taken on a fresh tape at Theta_J."""
    _check_episode(episode)
    theta0 = params.flatten()
    tilde = rollout(params, arch, _inner_method(cfg), episode.d_tr, cfg.alpha)
    grad = outer_gradient(tilde, arch, episode.d_val)
    return _meta_step(theta0, grad, arch, cfg)


def central_difference(fn: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    if eps <= 0:
        raise ContractViolation(f"eps must be positive, got {eps}")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.shape[0]):
        probe = x.copy()
        probe[i] = x[i] + eps
        upper = fn(probe)
        probe[i] = x[i] - eps
        lower = fn(probe)
        if not (np.isfinite(upper) and np.isfinite(lower)):
            raise NumericFailure("Non-finite objective while probing", where=f"coordinate {i}")
        grad[i] = (upper - lower) / (2.0 * eps)
    return grad


def update_ic_exact_fd(params: ParamSet, arch: Architecture, episode: MetaEpisode, cfg: MetaConfig,
                       eps: float = 1e-5) -> np.ndarray:
    """Full meta-gradient d L_sup(rollout(Theta_0)) / d Theta_0 by central differences (small models only)."""
    _check_episode(episode)
    n = param_count(arch)
    if n > FD_PARAM_CAP:
        raise OracleRefused(f"Finite-difference meta-gradient needs <= {FD_PARAM_CAP} parameters, model has {n}")
    method = _inner_method(cfg)

    def objective(theta: np.ndarray) -> float:
        end = rollout(unflatten(theta, arch), arch, method, episode.d_tr, cfg.alpha)
        return loss_value(end, lambda tape, nodes: supervised_loss(tape, nodes, arch, episode.d_val))

    return central_difference(objective, params.flatten(), eps)


def meta_gradient_alignment(params: ParamSet, arch: Architecture, episode: MetaEpisode, cfg: MetaConfig,
                            eps: float = 1e-5) -> float:
    """Cosine between the exact meta-gradient and the direction SPG actually moves Theta_0 against."""
    exact = update_ic_exact_fd(params, arch, episode, cfg, eps)
    spg_cfg = cfg.model_copy(update={"meta_alpha": 1.0, "update_scope": "all"})
    direction = params.flatten() - update_ic_spg(params, arch, episode, spg_cfg).flatten()
    denom = np.linalg.norm(exact) * np.linalg.norm(direction)
    cosine = float(exact @ direction / denom) if denom > 0 else 0.0
    logger.info(f"meta-gradient alignment cos={cosine:.4f} (J={len(episode.d_tr)})")
    return cosine


def time_update_ic(params: ParamSet, arch: Architecture, episode: MetaEpisode, cfg: MetaConfig,
                   repeats: int = 5) -> Dict[str, float]:
    """Mean wall-clock seconds of one SPG and one first-order UpdateIC."""
    timings = {}
    for name, fn in (("spg", update_ic_spg), ("firstorder", update_ic_firstorder)):
        start = time.perf_counter()
        for _ in range(repeats):
            fn(params, arch, episode, cfg)
        timings[name] = (time.perf_counter() - start) / repeats
    return timings


# --- Problems ---

class MsdaProblem(BaseModel):
    """Labeled sources, the target (used unlabeled for training) and labeled target data for evaluation."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    sources: List[DomainDataset]
    target: DomainDataset
    target_eval: DomainDataset


class SsdaProblem(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    source: DomainDataset
    labeled_tgt: DomainDataset
    unlabeled_tgt: DomainDataset
    target_eval: DomainDataset


Problem = Union[MsdaProblem, SsdaProblem]


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([seed, *tags])


class _Streams:
    """All batch sources of one run, created lazily so unused data is never touched."""

    def __init__(self, problem: Problem, batch_size: int, seed: int, J: int):
        self.problem = problem
        self.batch_size = batch_size
        self.seed = seed
        self.J = J
        self._cache: Dict[tuple, BatchStream] = {}
        self._meta_rng = _rng(seed, _META_STREAM)

    def _stream(self, key: tuple, make: Callable[[], DomainDataset]) -> BatchStream:
        if key not in self._cache:
            self._cache[key] = BatchStream(make(), self.batch_size, _rng(self.seed, *key))
        return self._cache[key]

    def source(self) -> DomainDataset:
        problem = self.problem
        if isinstance(problem, MsdaProblem):
            return self._stream((_SRC_STREAM,), lambda: concat(problem.sources, "sources")).next()
        return self._stream((_SRC_STREAM,), lambda: problem.source).next()

    def target(self) -> DomainDataset:
        problem = self.problem
        if isinstance(problem, MsdaProblem):
            return self._stream((_TGT_STREAM,), problem.target.unlabeled).next()
        return self._stream((_TGT_STREAM,), lambda: problem.unlabeled_tgt).next()

    def labeled_target(self) -> Optional[DomainDataset]:
        return self.problem.labeled_tgt if isinstance(self.problem, SsdaProblem) else None

    def episode(self) -> MetaEpisode:
        problem = self.problem
        if isinstance(problem, MsdaProblem):
            split = sample_meta_split(problem.sources, self._meta_rng)
            key = split.mte_index
            src = self._stream((_META_SRC_STREAM, key, 0), lambda: concat(split.mtr, "meta-train"))
            tgt = self._stream((_META_TGT_STREAM, key, 0), lambda: split.mte_unlabeled)
            val = self._stream((_META_TGT_STREAM, key, 1), lambda: split.mte)
            return MetaEpisode(d_tr=[DaBatch(src.next(), tgt.next()) for _ in range(self.J)], d_val=val.next())
        src = self._stream((_META_SRC_STREAM,), lambda: problem.source)
        tgt = self._stream((_META_TGT_STREAM,), lambda: problem.unlabeled_tgt)
        return MetaEpisode(d_tr=[DaBatch(src.next(), tgt.next()) for _ in range(self.J)], d_val=problem.labeled_tgt)


def _check_problem(problem: Problem):
    if isinstance(problem, MsdaProblem):
        if len(problem.sources) < 2:
            raise ContractViolation(
                f"Multi-source DA needs at least 2 source domains for a meta-train/meta-test split, got {len(problem.sources)}"
            )
        return
    labeled, held_out = problem.labeled_tgt, problem.target_eval
    if labeled.n == 0 or labeled.y is None:
        raise ContractViolation("SSDA needs a non-empty labeled target set")
    if labeled.domain_tag == held_out.domain_tag and labeled.split == held_out.split \
            and np.intersect1d(labeled.sample_ids, held_out.sample_ids).size:
        raise ContractViolation("labeled target samples overlap the target test split")


def _check_arch(arch: Architecture, *methods: DaMethod):
    for method in methods:
        if method.is_mcd and arch.num_classifiers != 2:
            raise ContractViolation(f"{method.kind} needs num_classifiers=2, architecture has {arch.num_classifiers}")


class _Recorder:
    def __init__(self, total_steps: int, eval_interval: int, problem: Problem, arch: Architecture):
        self.total = total_steps
        self.interval = eval_interval
        self.problem = problem
        self.arch = arch
        self.curve: List[tuple] = []
        self.losses = LossTraces()
        self.steps = 0
        self.eval_seconds = 0.0

    def record(self, params: ParamSet, sup: float, adapt: float):
        self.steps += 1
        self.losses.sup.append(sup)
        self.losses.adapt.append(adapt)
        if self.steps % self.interval == 0 or self.steps == self.total:
            start = time.perf_counter()
            acc = accuracy(params, self.arch, self.problem.target_eval, head=0)
            self.eval_seconds += time.perf_counter() - start
            self.curve.append((self.steps, acc))
            logger.debug(f"step={self.steps} acc={acc:.4f} sup={sup:.4f} adapt={adapt:.4f}")


class TrainOutcome(NamedTuple):
    report: RunReport
    params: ParamSet


def _train(problem: Problem, cfg: MetaConfig, method: DaMethod, seed: int, settings: Optional[TrainSettings],
           schedule: MetaMode, meta_updates: Optional[int] = None) -> TrainOutcome:
    settings = settings or TrainSettings()
    arch = settings.arch
    if cfg.inner_method is None:
        cfg = cfg.model_copy(update={"inner_method": method})
    _check_problem(problem)
    _check_arch(arch, method, cfg.inner_method)

    logger.info(f"--- Trainer: {schedule} {type(problem).__name__} ({method.kind}) seed={seed} ---")
    streams = _Streams(problem, settings.batch_size, seed, cfg.J)
    params = init_params(arch, settings.init, seed)
    opt = SgdState.fresh(params, cfg.alpha, settings.momentum)
    total_da = cfg.I * cfg.S
    recorder = _Recorder(total_da, settings.eval_interval, problem, arch)
    budget = Budget()

    def meta(current: ParamSet) -> ParamSet:
        budget.update_ic_calls += 1
        budget.inner_steps += cfg.J
        return update_ic_spg(current, arch, streams.episode(), cfg)

    def da(current: ParamSet, state: SgdState):
        budget.da_steps += 1
        if schedule == "source-only":
            result = supervised_step(method, current, arch, streams.source(), state, extra=streams.labeled_target())
        else:
            batch = DaBatch(streams.source(), streams.target(), streams.labeled_target())
            result = adapt_step(method, current, arch, batch, state)
        recorder.record(result.params, result.sup, result.adapt)
        return result.params, result.opt

    elapsed = 0.0
    if schedule == "online":
        for _ in range(cfg.I):
            start = time.perf_counter()
            params = meta(params)
            for _ in range(cfg.S):
                params, opt = da(params, opt)
            elapsed += time.perf_counter() - start
    else:
        start = time.perf_counter()
        if schedule == "sequential":
            for _ in range(cfg.I if meta_updates is None else meta_updates):
                params = meta(params)
        for _ in range(total_da):
            params, opt = da(params, opt)
        elapsed = time.perf_counter() - start

    final_acc = recorder.curve[-1][1]
    logger.info(f"Finished {schedule} {method.kind} seed={seed}: final_acc={final_acc:.4f}")
    report = RunReport(
        seed=seed,
        curve=recorder.curve,
        losses=recorder.losses,
        timing_s_per_outer_iter=max(elapsed - recorder.eval_seconds, 0.0) / cfg.I,
        final_acc=final_acc,
        budget=budget,
    )
    return TrainOutcome(report, params)


def train(problem: Problem, meta_mode: MetaMode, cfg: MetaConfig, method: DaMethod, seed: int,
          settings: Optional[TrainSettings] = None) -> TrainOutcome:
    """Dispatch on meta_mode; also hands back the final parameters."""
    return _train(problem, cfg, method, seed, settings, meta_mode)


def train_online_msda(domains: List[DomainDataset], target: DomainDataset, cfg: MetaConfig, method: DaMethod,
                      seed: int, settings: Optional[TrainSettings] = None,
                      target_eval: Optional[DomainDataset] = None) -> RunReport:
    """Online meta MSDA. Target labels are only read for evaluation (on target_eval, default `target`)."""
    problem = MsdaProblem(sources=domains, target=target, target_eval=target if target_eval is None else target_eval)
    return _train(problem, cfg, method, seed, settings, "online").report


def train_online_ssda(source: DomainDataset, labeled_tgt: DomainDataset, unlabeled_tgt: DomainDataset,
                      target_test: DomainDataset, cfg: MetaConfig, method: DaMethod, seed: int,
                      settings: Optional[TrainSettings] = None) -> RunReport:
    """Online meta SSDA: UpdateIC adapts source -> unlabeled target and validates on the k-shot labels."""
    problem = SsdaProblem(source=source, labeled_tgt=labeled_tgt, unlabeled_tgt=unlabeled_tgt, target_eval=target_test)
    return _train(problem, cfg, method, seed, settings, "online").report


def train_sequential(problem: Problem, cfg: MetaConfig, method: DaMethod, seed: int,
                     settings: Optional[TrainSettings] = None, meta_updates: Optional[int] = None) -> RunReport:
    """All UpdateIC calls first (default budget I), then the same I*S DA steps as the online run."""
    return _train(problem, cfg, method, seed, settings, "sequential", meta_updates).report


def train_vanilla(problem: Problem, cfg: MetaConfig, method: DaMethod, seed: int,
                  settings: Optional[TrainSettings] = None) -> RunReport:
    return _train(problem, cfg, method, seed, settings, "vanilla").report


def train_source_only(problem: Problem, cfg: MetaConfig, method: DaMethod, seed: int,
                      settings: Optional[TrainSettings] = None) -> RunReport:
    return _train(problem, cfg, method, seed, settings, "source-only").report
