"""
Experiment runner: config loading, per-run problem construction and the
execute_runs graph node that fans (grid row, seed) pairs out over a process pool.
"""

import json
import logging
import os
import re
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List

import numpy as np
from pydantic import ValidationError

from src.state import Architecture, ExperimentConfig, ExperimentState, RunConfig, RunReport
from src.tools.domains import generate, select_kshot
from src.tools.errors import ContractViolation
from src.tools.meta_engine import MsdaProblem, Problem, SsdaProblem, train
from src.tools.models import save_params

logger = logging.getLogger(__name__)

KSHOT_STREAM = 99


def format_validation_error(error: ValidationError) -> str:
    lines = []
    for item in error.errors():
        where = ".".join(str(part) for part in item["loc"]) or "<root>"
        lines.append(f"  {where}: {item['msg']}")
    return "\n".join(lines)


def load_experiment(path) -> ExperimentConfig:
    """Parse and validate an experiment JSON file; every problem is reported with its location."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ContractViolation(f"Cannot read config {path}: {e}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ContractViolation(f"{path}:{e.lineno}:{e.colno}: invalid JSON ({e.msg})") from e
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ContractViolation(f"{path}: invalid experiment config\n{format_validation_error(e)}") from e


def resolve_architecture(run: RunConfig) -> RunConfig:
    """
    Fill the architecture fields a config left unset from the benchmark and
    the method: input width and class count from the domains, two heads for
    MCD, the cosine classifier for MME. Explicit settings always win.
    """
    arch = run.settings.arch
    given = arch.model_fields_set
    methods = [run.method] + ([run.meta.inner_method] if run.meta.inner_method is not None else [])
    overrides = {}
    if "input_dim" not in given:
        overrides["input_dim"] = run.benchmark.input_dim
    if "num_classes" not in given:
        overrides["num_classes"] = run.benchmark.num_classes
    if "num_classifiers" not in given and any(m.is_mcd for m in methods):
        overrides["num_classifiers"] = 2
    if "classifier_kind" not in given and run.method.kind == "mme":
        overrides["classifier_kind"] = "normalized-with-temperature"
    if not overrides:
        return run
    resolved = Architecture.model_validate({**arch.model_dump(exclude_unset=True), **overrides})
    settings = run.settings.model_copy(update={"arch": resolved})
    return run.model_copy(update={"settings": settings})


def build_problem(run: RunConfig) -> Problem:
    """Generate the run's domains: train splits for learning, the target test split for evaluation."""
    bench = run.benchmark
    target_train = generate(bench.target, "train")
    target_test = generate(bench.target, "test")
    if run.scenario == "msda":
        sources = [generate(spec, "train") for spec in bench.sources]
        return MsdaProblem(sources=sources, target=target_train.unlabeled(), target_eval=target_test)
    # k-shot picks depend on the target domain only, so every seed sees the same labeled samples
    labeled, unlabeled = select_kshot(target_train, bench.k_shot, np.random.default_rng([bench.target.seed, KSHOT_STREAM]))
    return SsdaProblem(
        source=generate(bench.sources[0], "train"),
        labeled_tgt=labeled,
        unlabeled_tgt=unlabeled,
        target_eval=target_test,
    )


def run_stem(run: RunConfig) -> str:
    label = re.sub(r"[^\w.-]+", "_", run.label)
    return f"{label}__seed{run.seed}"


def run_one(run: RunConfig, output_dir: str) -> RunReport:
    """Train one (row, seed) pair and persist its report. Failures become a status='failed' report."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    run = resolve_architecture(run)
    try:
        outcome = train(build_problem(run), run.meta_mode, run.meta, run.method, run.seed, run.settings)
        report = outcome.report.model_copy(update={"config": run, "label": run.label})
        if run.save_params:
            save_params(out / f"{run_stem(run)}.params", outcome.params)
    except Exception as e:
        logger.error(f"Run {run.label} seed={run.seed} failed: {type(e).__name__}: {e}")
        report = RunReport(config=run, seed=run.seed, label=run.label, status="failed", error=f"{type(e).__name__}: {e}")
    (out / f"{run_stem(run)}.json").write_text(report.model_dump_json(indent=2))
    return report


def default_output_dir(config: ExperimentConfig) -> str:
    if config.output_dir:
        return config.output_dir
    return os.path.join(os.getenv("METADA_OUTPUT_DIR", "results"), config.name)


# --- Graph nodes ---

def load_config(state: ExperimentState) -> dict:
    """Node: parse the experiment file named in the state."""
    logger.info("--- Loader: ExperimentConfig ---")
    try:
        config = load_experiment(state["config_path"])
    except ContractViolation as e:
        logger.error(str(e))
        return {"errors": [str(e)], "exit_code": 2}
    output_dir = state.get("output_dir") or default_output_dir(config)
    n_runs = len(config.rows) * len(config.seeds)
    logger.info(f"Experiment {config.name}: {len(config.rows)} row(s) x {len(config.seeds)} seed(s) = {n_runs} runs -> {output_dir}")
    return {"config": config, "output_dir": output_dir}


def config_router(state: ExperimentState) -> str:
    """Conditional Edge: stop before any run if the config did not load."""
    if state.get("errors"):
        return "report_errors"
    return "execute_runs"


def report_errors(state: ExperimentState) -> dict:
    logger.error(f"--- Aborted: {len(state['errors'])} config error(s) ---")
    return {"exit_code": 2}


def execute_runs(state: ExperimentState) -> dict:
    """Node: every (row, seed) run, in grid order, on up to `jobs` worker processes."""
    logger.info("--- Runner: ExecuteRuns ---")
    runs: List[RunConfig] = state["config"].run_configs(state.get("seed_offset", 0))
    output_dir = state["output_dir"]
    jobs = max(1, state.get("jobs", 1))
    if jobs == 1 or len(runs) == 1:
        reports = [run_one(run, output_dir) for run in runs]
    else:
        with ProcessPoolExecutor(max_workers=min(jobs, len(runs))) as pool:
            reports = list(pool.map(run_one, runs, [output_dir] * len(runs)))
    failed = sum(r.status == "failed" for r in reports)
    logger.info(f"Finished {len(reports)} run(s), {failed} failed")
    return {"reports": reports}
