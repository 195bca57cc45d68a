"""Command-line entry points: run, replay, report, inspect, dsl tools, bench.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import sys
import tempfile
from pathlib import Path

import click
import numpy as np

from .backends import TokenLedger, make_backend
from .data import load_csv
from .dsl import fit_evaluate, parse, typecheck
from .errors import ConfigError, DslError, DslTypeError, MalmasError
from .evaluator import ModelSpec, default_metric, make_metric, mean_rank
from .evaluator.external import ExternalEvaluator
from .jsonio import dump_canonical, read_json
from .memory import MemoryFlags
from .orchestrator import RunConfig, replay as replay_run, report_text, run, run_and_persist, _table


def _parse_router(value: str) -> tuple[str, int]:
    if value in ("llm", "all"):
        return value, 4
    for prefix, strategy in (("fixed:", "fixed_k"), ("random:", "random_k")):
        if value.startswith(prefix):
            try:
                return strategy, int(value[len(prefix):])
            except ValueError:
                raise click.UsageError(f"bad router k in {value!r}") from None
    raise click.UsageError(f"unknown router {value!r} (llm, fixed:K, random:K, all)")


def _parse_model(value: str, trees: int | None, learning_rate: float | None,
                 max_depth: int | None, simple: bool) -> ModelSpec:
    overrides = {}
    if trees is not None:
        overrides["trees"] = trees
    if learning_rate is not None:
        overrides["learning_rate"] = learning_rate
    if max_depth is not None:
        overrides["max_depth"] = max_depth
    if value == "builtin-gbdt":
        return ModelSpec.make("builtin_gbdt", simple=simple, **overrides)
    if value == "builtin-logreg":
        return ModelSpec.make("builtin_logreg", **overrides)
    if value.startswith("external:"):
        cmd = value[len("external:"):]
        if not cmd:
            raise click.UsageError("external model needs a command: external:CMD")
        return ModelSpec.make("external", simple=simple, external_cmd=cmd, **overrides)
    raise click.UsageError(
        f"unknown model {value!r} (builtin-gbdt, builtin-logreg, external:CMD)"
    )


def _build_backend(value: str, ledger: TokenLedger, data, seed: int,
                   endpoint: str, llm_model: str):
    if value == "openai":
        return make_backend("openai", ledger, endpoint=endpoint, model=llm_model)
    if value == "heuristic":
        schema = tuple(c for c in data.schema if c.name != data.target)
        return make_backend("heuristic", ledger, schema=schema, seed=seed)
    if value.startswith("scripted:"):
        path = value[len("scripted:"):]
        if not path:
            raise click.UsageError("scripted backend needs a file: scripted:FILE")
        return make_backend("scripted", ledger, script=path)
    raise click.UsageError(
        f"unknown backend {value!r} (openai, scripted:FILE, heuristic)"
    )


@click.group()
def cli():
    """Multi-agent feature generation for tabular datasets."""


@cli.command("run")
@click.option("--data", "data_path", required=True, help="CSV file with a header row.")
@click.option("--target", required=True, help="Target column name.")
@click.option("--task", required=True, type=click.Choice(["classification", "regression"]))
@click.option("--config", "config_path", default=None, help="JSON config; flags override it.")
@click.option("--out", required=True, help="Run directory (created; all writes stay inside).")
@click.option("--rounds", type=int, default=None, help="Interaction rounds (default 4).")
@click.option("--top-n", type=int, default=None, help="Features admitted per round (default 3).")
@click.option("--proposals", type=int, default=None, help="Proposals per agent (default 5).")
@click.option("--min-effective", type=int, default=None,
              help="Effective features needed before an agent summary (default 2).")
@click.option("--router", default=None, help="llm, fixed:K, random:K, or all (default llm).")
@click.option("--backend", default="heuristic",
              help="openai, scripted:FILE, or heuristic (default heuristic).")
@click.option("--model", default=None,
              help="builtin-gbdt, builtin-logreg, or external:CMD "
                   "(default: the config file's model, else builtin-gbdt).")
@click.option("--trees", type=int, default=None, help="Override tree count.")
@click.option("--learning-rate", type=float, default=None, help="Override learning rate.")
@click.option("--max-depth", type=int, default=None, help="Override tree depth.")
@click.option("--simple", is_flag=True, help="Small-dataset external preset (50 trees).")
@click.option("--metric", default=None, help="auc, accuracy, or nrmse (default by task).")
@click.option("--folds", type=int, default=None, help="CV folds (default 5).")
@click.option("--seed", type=int, default=0, help="Run seed; all randomness derives from it.")
@click.option("--train-fraction", type=float, default=None, help="Train share (default 0.6).")
@click.option("--workers", type=int, default=None, help="Agent worker threads (default auto).")
@click.option("--endpoint", default="https://api.openai.com/v1", help="OpenAI-compatible base URL.")
@click.option("--llm-model", default="gpt-4o-mini", help="Chat model name for --backend openai.")
@click.option("--no-proc-mem", is_flag=True, help="Disable procedural memory.")
@click.option("--no-feed-mem", is_flag=True, help="Disable feedback memory.")
@click.option("--no-con-mem", is_flag=True, help="Disable per-agent conceptual memory.")
@click.option("--no-global-mem", is_flag=True, help="Disable the global summary memory.")
@click.option("--per-agent-top-n", is_flag=True, help="Select top-N per agent instead of globally.")
@click.option("--batch-eval", is_flag=True, help="Evaluate each agent's candidates jointly.")
@click.option("--admit-nonpositive", is_flag=True, help="Admit features with gain <= 0.")
def run_cmd(data_path, target, task, config_path, out, rounds, top_n, proposals,
            min_effective, router, backend, model, trees, learning_rate, max_depth,
            simple, metric, folds, seed, train_fraction, workers, endpoint, llm_model,
            no_proc_mem, no_feed_mem, no_con_mem, no_global_mem, per_agent_top_n,
            batch_eval, admit_nonpositive):
    """Run the feature-generation loop and persist the run directory."""
    base = read_json(config_path) if config_path else {}
    overrides = {
        "rounds": rounds,
        "top_n": top_n,
        "proposals_per_agent": proposals,
        "min_effective": min_effective,
        "metric": metric,
        "folds": folds,
        "train_fraction": train_fraction,
        "workers": workers,
    }
    for key, value in overrides.items():
        if value is not None:
            base[key] = value
    base["seed"] = seed
    if router is not None:
        base["router_strategy"], base["router_k"] = _parse_router(router)
    # --model replaces the config file's model outright; bare hyperparameter
    # flags override on top of whichever model is in effect.
    model_base = dict(base.get("model", {}))
    if model is not None or not model_base:
        model_base = _parse_model(
            model or "builtin-gbdt", None, None, None, simple
        ).to_dict()
    for key, value in (("trees", trees), ("learning_rate", learning_rate),
                       ("max_depth", max_depth)):
        if value is not None:
            model_base[key] = value
    base["model"] = model_base
    flags = MemoryFlags.from_dict(base.get("memory_flags", {}))
    base["memory_flags"] = {
        "proc": flags.proc and not no_proc_mem,
        "feed": flags.feed and not no_feed_mem,
        "con": flags.con and not no_con_mem,
        "global": flags.use_global and not no_global_mem,
    }
    if per_agent_top_n:
        base["per_agent_top_n"] = True
    if batch_eval:
        base["batch_eval"] = True
    if admit_nonpositive:
        base["require_positive_gain"] = False
    config = RunConfig.from_dict(base)

    data = load_csv(data_path, target, task)
    ledger = TokenLedger()
    chat = _build_backend(backend, ledger, data, seed, endpoint, llm_model)
    external = None
    try:
        if config.model.kind == "external":
            external = ExternalEvaluator(config.model.external_cmd)
        result = run_and_persist(
            config, data, chat, out,
            {"path": data_path, "target": target, "task": task},
            external=external,
        )
    finally:
        if external is not None:
            external.close()
    click.echo(f"run written to {out}")
    click.echo(
        f"final train CV {result.metric_name}: {result.final_cv_metric:.6g}  "
        f"test {result.metric_name}: {result.test_metric:.6g}"
    )


@cli.command("replay")
@click.argument("run_dir")
def replay_cmd(run_dir):
    """Re-execute a run from its transcript and verify byte equality."""
    if not (Path(run_dir) / "config.json").exists():
        raise click.UsageError(f"{run_dir} is not a run directory")
    with tempfile.TemporaryDirectory(prefix="malmas-replay-") as scratch:
        mismatches = replay_run(run_dir, scratch)
    if mismatches:
        raise MalmasError(f"replay mismatch in {', '.join(mismatches)}")
    click.echo(f"replay verified: {run_dir}")


@cli.command("report")
@click.argument("run_dir")
@click.option("--json", "as_json", is_flag=True, help="Emit the raw result JSON.")
def report_cmd(run_dir, as_json):
    """Print per-round metrics and token usage for a persisted run."""
    path = Path(run_dir) / "result.json"
    if not path.exists():
        raise click.UsageError(f"no result.json under {run_dir}")
    result = read_json(path)
    if as_json:
        click.echo(dump_canonical(result), nl=False)
    else:
        click.echo(report_text(result))


@cli.command("inspect-memory")
@click.argument("run_dir")
@click.option("--round", "round_no", type=int, default=None, help="Only this round's records.")
@click.option("--agent", default=None, help="Only this agent's stores.")
def inspect_memory_cmd(run_dir, round_no, agent):
    """Pretty-print slices of a run's memory snapshot."""
    path = Path(run_dir) / "memory.json"
    if not path.exists():
        raise click.UsageError(f"no memory.json under {run_dir}")
    snap = read_json(path)
    agents = snap["agents"]
    if agent is not None:
        if agent not in agents:
            raise click.UsageError(
                f"unknown agent {agent!r} (have: {', '.join(sorted(agents))})"
            )
        agents = {agent: agents[agent]}
    if round_no is not None:
        agents = {
            role: {
                "proc": [r for r in stores["proc"] if r["round"] == round_no],
                "feed": [r for r in stores["feed"] if r["round"] == round_no],
                "concepts": stores["concepts"],
            }
            for role, stores in agents.items()
        }
    view = {"round": snap["round"], "agents": agents, "global": snap["global"]}
    click.echo(dump_canonical(view), nl=False)


@cli.group("dsl")
def dsl_group():
    """Feature-language utilities."""


@dsl_group.command("check")
@click.argument("program_file")
def dsl_check_cmd(program_file):
    """Parse a program file; report {ok, errors} as JSON."""
    text = Path(program_file).read_text(encoding="utf-8")
    try:
        program = parse(text)
    except DslError as exc:
        click.echo(dump_canonical(
            {"ok": False, "errors": [{"message": exc.message, "offset": exc.offset}]}
        ), nl=False)
        raise MalmasError(f"invalid program: {exc}") from None
    click.echo(dump_canonical({"ok": True, "feature": program.feature_name}), nl=False)


@dsl_group.command("eval")
@click.option("--data", "data_path", required=True, help="CSV file to evaluate against.")
@click.option("--program", "program_file", required=True, help="Program file.")
@click.option("--target", default=None, help="Target column (default: first column).")
@click.option("--seed", type=int, default=0)
def dsl_eval_cmd(data_path, program_file, target, seed):
    """Fit a program on a CSV and print a value preview as JSON."""
    from .data import Preprocessor

    text = Path(program_file).read_text(encoding="utf-8")
    if target is None:
        with open(data_path, encoding="utf-8") as handle:
            header = handle.readline().strip()
        target = header.split(",")[0].strip('"')
    raw = load_csv(data_path, target, "regression")
    table = Preprocessor().fit_transform(raw)
    schema = tuple(c for c in table.schema if c.name != table.target)
    try:
        program = parse(text)
        typed = typecheck(program, schema)
    except (DslError, DslTypeError) as exc:
        click.echo(dump_canonical({"ok": False, "errors": [{"message": str(exc)}]}), nl=False)
        raise MalmasError(f"invalid program: {exc}") from None
    values, _ = fit_evaluate(typed, table, seed)
    click.echo(dump_canonical({
        "ok": True,
        "feature": program.feature_name,
        "rows": int(values.size),
        "preview": [float(v) for v in values[:5]],
    }), nl=False)


@cli.command("bench")
@click.option("--suite", "suite_path", required=True, help="Suite JSON: datasets x configs.")
@click.option("--json", "as_json", is_flag=True, help="Emit raw values instead of a table.")
def bench_cmd(suite_path, as_json):
    """Run a config matrix over datasets and report test metrics + mean ranks."""
    suite = read_json(suite_path)
    datasets = suite.get("datasets") or []
    configs = suite.get("configs") or []
    if not datasets or not configs:
        raise click.UsageError("suite needs nonempty 'datasets' and 'configs'")
    base_seed = int(suite.get("seed", 0))

    directions = set()
    values = np.full((len(datasets), len(configs)), np.nan)
    for i, ds in enumerate(datasets):
        data = load_csv(ds["path"], ds["target"], ds["task"])
        for j, entry in enumerate(configs):
            overrides = {k: v for k, v in entry.items() if k not in ("name", "backend")}
            overrides.setdefault("seed", base_seed)
            config = RunConfig.from_dict(overrides)
            metric = (make_metric(config.metric) if config.metric
                      else default_metric(ds["task"]))
            directions.add(metric.direction)
            ledger = TokenLedger()
            chat = _build_backend(
                entry.get("backend", "heuristic"), ledger, data, config.seed,
                "https://api.openai.com/v1", "gpt-4o-mini",
            )
            result = run(config, data, chat)
            values[i, j] = result.test_metric
    if len(directions) != 1:
        raise ConfigError("bench suites must not mix maximize and minimize metrics")
    ranks = mean_rank(values, directions.pop())

    names = [entry.get("name", f"config{j}") for j, entry in enumerate(configs)]
    if as_json:
        click.echo(dump_canonical({
            "datasets": [ds["name"] for ds in datasets],
            "configs": names,
            "values": [[float(v) for v in row] for row in values],
            "mean_rank": ranks,
        }), nl=False)
        return
    rows = [
        [ds["name"]] + [f"{values[i, j]:.6g}" for j in range(len(configs))]
        for i, ds in enumerate(datasets)
    ]
    rows.append(["mean rank"] + [f"{r:.3g}" for r in ranks])
    click.echo(_table(rows, ["dataset"] + names))


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.UsageError as exc:
        click.echo(f"error: {exc.format_message()}", err=True)
        return 1
    except MalmasError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    except OSError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
