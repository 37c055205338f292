import operator
from typing import Annotated, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator
from typing_extensions import TypedDict

ClassifierKind = Literal["plain-linear", "normalized-with-temperature"]
InitKind = Literal["kaiming-uniform", "kaiming-normal", "xavier-uniform", "xavier-normal"]
MethodKind = Literal["dann", "mcd-onestep", "mcd-multistep", "mme"]
MetaMode = Literal["online", "sequential", "vanilla", "source-only"]
Scenario = Literal["msda", "ssda"]
SliceMetric = Literal["test_acc", "sup_loss", "adapt_loss"]


class StrictModel(BaseModel):
    """Config objects reject unknown fields so a typo never silently falls back to a default."""
    model_config = ConfigDict(extra="forbid")


# --- Model description ---

class Architecture(StrictModel):
    """MLP feature extractor F, classifier head(s) C and a 1-logit domain discriminator D."""
    input_dim: int = Field(default=2, ge=1)
    feature_dims: List[Annotated[int, Field(ge=1)]] = Field(default_factory=lambda: [64, 32], min_length=1)
    num_classes: int = Field(default=2, ge=2)
    num_classifiers: Literal[1, 2] = 1
    discriminator_dims: List[Annotated[int, Field(ge=1)]] = Field(default_factory=lambda: [16])
    classifier_kind: ClassifierKind = "plain-linear"
    temperature: float = Field(default=0.05, gt=0, description="Only used by the normalized classifier")


class InitScheme(StrictModel):
    kind: InitKind = "kaiming-uniform"
    perturb_sigma: float = Field(default=0.0, ge=0, description="Std of Gaussian noise added to every weight")


# --- Domain adaptation ---

class DaMethod(StrictModel):
    kind: MethodKind = "dann"
    lam: float = Field(default=1.0, ge=0, description="Adaptation weight lambda")
    n_steps: int = Field(default=4, ge=1, description="Feature-extractor steps per mcd-multistep update")

    @property
    def is_mcd(self) -> bool:
        return self.kind in ("mcd-onestep", "mcd-multistep")


class MetaConfig(StrictModel):
    J: int = Field(default=1, ge=1, description="Inner steps per UpdateIC")
    S: int = Field(default=3, ge=1, description="DA steps per meta-update")
    I: int = Field(default=1000, ge=1, description="Outer iterations")
    alpha: float = Field(default=0.01, gt=0, description="Shared learning rate")
    meta_alpha: Optional[float] = Field(default=None, ge=0, description="Meta-step learning rate; None shares alpha")
    inner_method: Optional[DaMethod] = Field(default=None, description="L_inner; None reuses the run's DA method")
    update_scope: Literal["all", "exclude-adversary"] = "all"

    @property
    def effective_meta_alpha(self) -> float:
        return self.alpha if self.meta_alpha is None else self.meta_alpha


# --- Synthetic benchmarks ---

class MoonsSpec(StrictModel):
    family: Literal["moons"] = "moons"
    rotation_deg: float = 0.0
    n_per_class: int = Field(default=500, ge=1)
    noise_sigma: float = Field(default=0.1, ge=0)
    seed: int = 0

    @property
    def tag(self) -> str:
        return f"moons@{self.rotation_deg:g}deg"


class GaussShiftSpec(StrictModel):
    family: Literal["gaussian"] = "gaussian"
    class_means: List[List[float]] = Field(min_length=2)
    domain_offset: List[float]
    cov_scale: float = Field(default=1.0, gt=0)
    n_per_class: int = Field(default=200, ge=1)
    seed: int = 0
    name: Optional[str] = None

    @model_validator(mode="after")
    def _check_geometry(self):
        dims = {len(m) for m in self.class_means}
        if len(dims) != 1:
            raise ValueError("class_means must all have the same dimension")
        if len(self.domain_offset) not in dims:
            raise ValueError("domain_offset dimension must match class_means")
        rows = [tuple(m) for m in self.class_means]
        if len(set(rows)) != len(rows):
            raise ValueError("class_means must be pairwise distinct")
        return self

    @property
    def K(self) -> int:
        return len(self.class_means)

    @property
    def dim(self) -> int:
        return len(self.domain_offset)

    @property
    def tag(self) -> str:
        offset = ",".join(f"{v:g}" for v in self.domain_offset)
        return self.name or f"gauss@({offset})"


DomainSpec = Annotated[Union[MoonsSpec, GaussShiftSpec], Field(discriminator="family")]


class BenchmarkSpec(StrictModel):
    sources: List[DomainSpec] = Field(min_length=1)
    target: DomainSpec
    k_shot: int = Field(default=3, ge=1, description="Labeled target samples per class (SSDA only)")

    @model_validator(mode="after")
    def _check_families(self):
        families = {s.family for s in self.sources} | {self.target.family}
        if len(families) != 1:
            raise ValueError("all domains of a benchmark must come from the same family")
        return self

    @property
    def input_dim(self) -> int:
        return 2 if isinstance(self.target, MoonsSpec) else self.target.dim

    @property
    def num_classes(self) -> int:
        return 2 if isinstance(self.target, MoonsSpec) else self.target.K


class TrainSettings(StrictModel):
    """Everything a trainer needs besides the data, the method and the meta schedule."""
    arch: Architecture = Field(default_factory=Architecture)
    init: InitScheme = Field(default_factory=InitScheme)
    batch_size: int = Field(default=32, ge=1)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    eval_interval: int = Field(default=25, ge=1)


# --- Experiment grid ---

class GridRow(StrictModel):
    label: Optional[str] = None
    method: DaMethod = Field(default_factory=DaMethod)
    meta_mode: MetaMode = "online"
    meta: MetaConfig = Field(default_factory=MetaConfig)
    init: Optional[InitScheme] = None

    @property
    def name(self) -> str:
        return self.label or f"{self.meta_mode}-{self.method.kind}"


class RunConfig(StrictModel):
    """A fully resolved (grid row, seed) pair: enough to reproduce one RunReport."""
    experiment: str
    label: str
    scenario: Scenario
    benchmark: BenchmarkSpec
    method: DaMethod
    meta_mode: MetaMode
    meta: MetaConfig
    settings: TrainSettings
    seed: int
    save_params: bool = False


class ExperimentConfig(StrictModel):
    name: str = "experiment"
    scenario: Scenario
    benchmark: BenchmarkSpec
    rows: List[GridRow] = Field(min_length=1)
    seeds: List[int] = Field(min_length=1)
    output_dir: Optional[str] = None
    arch: Architecture = Field(default_factory=Architecture)
    init: InitScheme = Field(default_factory=InitScheme)
    eval_interval: int = Field(default=25, ge=1)
    batch_size: int = Field(default=32, ge=1)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    save_params: bool = False

    @model_validator(mode="after")
    def _check_scenario(self):
        n_sources = len(self.benchmark.sources)
        if self.scenario == "msda" and n_sources < 2:
            raise ValueError("msda needs at least 2 source domains to form a meta-train/meta-test split")
        if self.scenario == "ssda" and n_sources != 1:
            raise ValueError("ssda takes exactly 1 source domain")
        labels = [row.name for row in self.rows]
        if len(set(labels)) != len(labels):
            raise ValueError(f"grid row labels must be unique, got {labels}")
        return self

    def run_configs(self, seed_offset: int = 0) -> List[RunConfig]:
        runs = []
        for row in self.rows:
            settings = TrainSettings(
                arch=self.arch,
                init=row.init or self.init,
                batch_size=self.batch_size,
                momentum=self.momentum,
                eval_interval=self.eval_interval,
            )
            for seed in self.seeds:
                runs.append(RunConfig(
                    experiment=self.name,
                    label=row.name,
                    scenario=self.scenario,
                    benchmark=self.benchmark,
                    method=row.method,
                    meta_mode=row.meta_mode,
                    meta=row.meta,
                    settings=settings,
                    seed=seed + seed_offset,
                    save_params=self.save_params,
                ))
        return runs


# --- Outputs ---

class LossTraces(BaseModel):
    sup: List[float] = Field(default_factory=list)
    adapt: List[float] = Field(default_factory=list)


class Budget(BaseModel):
    update_ic_calls: int = 0
    inner_steps: int = 0
    da_steps: int = 0


class RunReport(BaseModel):
    """Persisted outcome of one training run."""
    config: Optional[RunConfig] = None
    seed: int
    label: str = ""
    status: Literal["ok", "failed"] = "ok"
    error: Optional[str] = None
    curve: List[Tuple[int, float]] = Field(default_factory=list, description="[step, target accuracy] pairs")
    losses: LossTraces = Field(default_factory=LossTraces)
    timing_s_per_outer_iter: float = 0.0
    final_acc: Optional[float] = Field(default=None, ge=0, le=1)
    budget: Budget = Field(default_factory=Budget)


class SliceSpec(StrictModel):
    theta0: str
    thetaA: str
    thetaB: str
    grid_min: float = -0.5
    grid_max: float = 1.5
    grid_n: int = Field(default=41, ge=2)
    metrics: List[SliceMetric] = Field(default_factory=lambda: ["test_acc", "sup_loss", "adapt_loss"], min_length=1)
    method: DaMethod = Field(default_factory=DaMethod)
    eval_source: DomainSpec
    eval_target: DomainSpec
    output: str = "slice.csv"

    @model_validator(mode="after")
    def _check_grid(self):
        if self.grid_max <= self.grid_min:
            raise ValueError("grid_max must exceed grid_min")
        return self


# --- Graph State ---

class ExperimentState(TypedDict):
    """State of the `run` pipeline graph."""
    config_path: str
    seed_offset: int
    jobs: int
    config: Optional[ExperimentConfig]
    output_dir: Optional[str]
    errors: Annotated[List[str], operator.add]

    # Runs finish in any order; the reducer appends each batch of reports
    reports: Annotated[List[RunReport], operator.add]

    summary_path: Optional[str]
    comparison_path: Optional[str]
    exit_code: int
