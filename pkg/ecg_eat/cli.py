"""
ecg-eat command line.

    ecg-eat gen     [--config PATH] [--seed N] [--out DIR]
    ecg-eat run     [--stages preprocess balance ...] [--config PATH] [--seed N] [--out DIR]
    ecg-eat report  [--config PATH] [--seed N] [--out DIR]

Every command prints one JSON result document on stdout; failures print a JSON failure
document on stderr and exit with 2 (configuration), 3 (missing prerequisite or artifact)
or 4 (numerical failure).
"""

import argparse
import logging
import sys
from traceback import format_exc

from ansible.module_utils.common.text.converters import to_native

from ecg_eat import __version__
from ecg_eat.module_utils.config import load_config, output_writable
from ecg_eat.module_utils.errors import ArtifactError, EcgEatError
from ecg_eat.module_utils.store import dumps_json
from ecg_eat.pipeline import PIPELINE_STAGES, RunContext, run_pipeline, run_stage

LOGGER = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class Command:
    """One parsed invocation and its JSON result protocol."""

    def __init__(self, params, stdout=None, stderr=None):
        self.params = params
        self.stdout = stdout or sys.stdout
        self.stderr = stderr or sys.stderr

    def exit_json(self, changed=False, **kwargs):
        self.stdout.write(dumps_json({"changed": changed, "failed": False, **kwargs}))
        self.stdout.flush()
        raise SystemExit(0)

    def fail_json(self, msg, exit_code=1, **kwargs):
        self.stderr.write(dumps_json({"failed": True, "msg": msg, "exit_code": exit_code, **kwargs}))
        self.stderr.flush()
        raise SystemExit(exit_code)


def build_parser():
    parser = argparse.ArgumentParser(prog="ecg-eat", description="ECG multimodal fusion with EAT certification")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="override the configured output directory")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("--quiet", action="store_true", help="warnings and errors only")

    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("gen", parents=[common], help="synthesize the dataset and its splits")
    run = commands.add_parser("run", parents=[common], help="run pipeline stages in order")
    run.add_argument("--stages", nargs="+", choices=PIPELINE_STAGES, default=list(PIPELINE_STAGES),
                     metavar="STAGE", help=f"subset of: {' '.join(PIPELINE_STAGES)}")
    commands.add_parser("report", parents=[common], help="consolidate a completed run")
    return parser


def configure_logging(verbose=False, quiet=False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level)


def core(command):
    """Core functionality of the command line."""
    params = command.params
    config = load_config(params.config, params.seed, params.out)
    if not output_writable(config["output_dir"]):
        raise ArtifactError("output directory is not writable", config["output_dir"])
    ctx = RunContext.from_config(config)
    ctx.store.put("config.json", config)

    if params.command == "gen":
        entry = run_stage(ctx, "gen")
        command.exit_json(changed=True, output_dir=str(ctx.store.root), stages={"gen": entry})
    if params.command == "run":
        entries = run_pipeline(ctx, params.stages)
        command.exit_json(changed=True, output_dir=str(ctx.store.root), stages=entries)

    entry = run_stage(ctx, "report")
    verdict = ctx.store.get("eat/verdict.json").json
    summary = ctx.store.get("report/summary.txt").path.read_text(encoding="utf-8").splitlines()
    command.exit_json(changed=True, output_dir=str(ctx.store.root), stages={"report": entry},
                      overall="PASS" if verdict["overall"] else "FAIL", summary=summary)


def main(argv=None):
    """Entry point of the ecg-eat script."""
    params = build_parser().parse_args(argv)
    configure_logging(params.verbose, params.quiet)
    command = Command(params)

    try:
        core(command)
    except EcgEatError as error:
        command.fail_json(msg=to_native(error), exit_code=error.exit_code, exception=format_exc())
    except Exception as exception_error:  # pylint: disable=broad-except
        command.fail_json(msg=to_native(exception_error), exception=format_exc())


if __name__ == "__main__":
    main()
