import argparse
import logging
import os
import sys
from typing import List, Optional

from dotenv import load_dotenv
load_dotenv()

from langgraph.graph import StateGraph, START, END

from src.nodes.aggregator import load_reports, log_summary, summarize, aggregate, summarize_reports, write_outputs
from src.nodes.runner import config_router, execute_runs, load_config, report_errors
from src.nodes.slicer import load_slice_spec, write_slice
from src.state import ExperimentState
from src.tools.errors import ContractViolation, MetaDAError

logger = logging.getLogger(__name__)


def build_graph():
    """load_config -> (report_errors | execute_runs -> summarize -> aggregate)."""
    workflow = StateGraph(ExperimentState)

    workflow.add_node("load_config", load_config)
    workflow.add_node("report_errors", report_errors)
    workflow.add_node("execute_runs", execute_runs)
    workflow.add_node("summarize", summarize)
    workflow.add_node("aggregate", aggregate)

    workflow.add_edge(START, "load_config")
    workflow.add_conditional_edges(
        "load_config",
        config_router,
        {
            "report_errors": "report_errors",
            "execute_runs": "execute_runs",
        }
    )
    workflow.add_edge("report_errors", END)
    workflow.add_edge("execute_runs", "summarize")
    workflow.add_edge("summarize", "aggregate")
    workflow.add_edge("aggregate", END)
    return workflow.compile()


app = build_graph()


def run_experiment(config_path: str, seed_offset: int = 0, jobs: int = 1, output_dir: Optional[str] = None) -> dict:
    """Run every (row, seed) of an experiment file; returns the final graph state."""
    initial_state = {
        "config_path": config_path,
        "seed_offset": seed_offset,
        "jobs": jobs,
        "config": None,
        "output_dir": output_dir,
        "errors": [],
        "reports": [],
        "summary_path": None,
        "comparison_path": None,
        "exit_code": 0,
    }
    return app.invoke(initial_state)


def aggregate_dir(report_dir: str) -> int:
    """Recompute summary.csv and comparison.csv from the report files in a directory."""
    reports = load_reports(report_dir)
    if not reports:
        logger.error(f"No run reports found in {report_dir}")
        return 1
    log_summary(summarize_reports(reports))
    summary, comparison = write_outputs(reports, report_dir)
    logger.info(f"Wrote {summary} and {comparison}")
    return 1 if any(r.status == "failed" for r in reports) else 0


def _configure_logging(quiet: bool):
    level = logging.WARNING if quiet else os.getenv("METADA_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed-offset", type=int, default=0, help="Added to every seed of the grid")
    common.add_argument("--jobs", type=int, default=int(os.getenv("METADA_JOBS", "1")),
                        help="Independent runs executed in parallel")
    common.add_argument("--quiet", action="store_true", help="Only log warnings and errors")

    parser = argparse.ArgumentParser(prog="metada", description="Online meta-learning for domain adaptation")
    commands = parser.add_subparsers(dest="command", required=True)
    run = commands.add_parser("run", parents=[common], help="Run an experiment grid")
    run.add_argument("config", help="Experiment JSON file")
    run.add_argument("--output-dir", default=None, help="Overrides the config's output_dir")
    slice_cmd = commands.add_parser("slice", parents=[common], help="Sample a weight-space slice")
    slice_cmd.add_argument("spec", help="Slice JSON file")
    agg = commands.add_parser("aggregate", parents=[common], help="Summarise a directory of run reports")
    agg.add_argument("report_dir")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = _parser().parse_args(argv)
    _configure_logging(args.quiet)

    if args.command == "run":
        result = run_experiment(args.config, args.seed_offset, args.jobs, args.output_dir)
        if result.get("summary_path"):
            logger.info(f"Summary: {result['summary_path']}")
        return result.get("exit_code", 0)

    if args.command == "slice":
        try:
            spec = load_slice_spec(args.spec)
        except ContractViolation as e:
            logger.error(str(e))
            return 2
        try:
            write_slice(spec)
        except MetaDAError as e:
            logger.error(f"Slice failed: {e}")
            return 1
        return 0

    return aggregate_dir(args.report_dir)


if __name__ == "__main__":
    sys.exit(main())
