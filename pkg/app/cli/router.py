import argparse
import logging
import sys
from collections.abc import Callable
from pathlib import Path

import pandas as pd

from app.core.config import settings
from app.core.exceptions import ConfigError
from app.schemas.features import FEATURE_COLUMNS
from app.services.features import assemble_features
from app.services.graph import session_weight_matrix
from app.services.pipeline import MODELS, fit_model, run_pipeline, success_design
from app.services.records import load_dataset, read_leader_list, save_dataset
from app.services.rewire import (
    DEFAULT_REPAIR_ATTEMPTS,
    DEFAULT_WINDOW,
    generate_ensemble,
    save_world,
    verify_world,
)
from app.services.robustness import robustness_suite
from app.services.triads import DEFAULT_THETA, census_sessions, census_table, closure_curve, triplet_frame
from app.stats.inference import permutation_pvalues
from app.stats.margins import marginal_predictions
from app.storage.files import mark_current, write_frame, write_kv, write_model

from .dependencies import (
    MODEL_ALIASES,
    get_censuses,
    get_config,
    get_dataset,
    get_features,
    get_fit,
    get_index,
    parse_grid,
    resolve_model,
    stage_digest,
    up_to_date,
)

logger = logging.getLogger(__name__)

Handler = Callable[[argparse.Namespace], None]


def arg(*flags: str, **kwargs) -> tuple[tuple[str, ...], dict]:
    return flags, kwargs


class CommandRouter:
    """Groups commands under one parser; `graph weights` style names nest."""

    def __init__(self, prog: str, description: str = ""):
        self.parser = argparse.ArgumentParser(prog=prog, description=description)
        self.parser.add_argument("--log-level", default=settings.LOG_LEVEL, help="logging level")
        self._groups = {(): self.parser.add_subparsers(dest="command", required=True, metavar="COMMAND")}

    def _subparsers(self, path: tuple[str, ...]):
        if path not in self._groups:
            parent = self._subparsers(path[:-1])
            group = parent.add_parser(path[-1], help=f"{path[-1]} commands")
            self._groups[path] = group.add_subparsers(dest="_".join(("command", *path)), required=True, metavar="COMMAND")
        return self._groups[path]

    def command(self, name: str, *arguments: tuple[tuple[str, ...], dict], help: str = "") -> Callable[[Handler], Handler]:
        *group, leaf = name.split()

        def register(handler: Handler) -> Handler:
            parser = self._subparsers(tuple(group)).add_parser(leaf, help=help, description=help)
            for flags, kwargs in arguments:
                parser.add_argument(*flags, **kwargs)
            parser.set_defaults(handler=handler)
            return handler

        return register

    def parse(self, argv: list[str] | None = None) -> argparse.Namespace:
        return self.parser.parse_args(argv)


router = CommandRouter(prog="triadlab", description=settings.APP_DESCRIPTION)

DATASET = arg("--dataset", type=Path, required=True, help="dataset directory (sessions.csv, personnel.csv)")
OUT = arg("--out", type=Path, required=True)
THETA = arg("--theta", type=int, default=DEFAULT_THETA, help="forbidden triad threshold")


### Build a canonical dataset directory from tabular and text records
@router.command(
    "ingest",
    arg("--sessions", type=Path, required=True),
    arg("--personnel", type=Path, required=True),
    arg("--records", type=Path, help="session records in the text format, appended"),
    OUT,
    help="validate inputs and write a dataset directory",
)
def ingest(args: argparse.Namespace) -> None:
    digest = stage_digest([args.sessions, args.personnel, args.records])
    if up_to_date(args.out / "sessions.csv", digest):
        return
    d = load_dataset(args.sessions, args.personnel, args.records)
    sessions_path, _ = save_dataset(d, args.out)
    mark_current(sessions_path, digest)
    logger.info("Dataset %s written to %s", d.digest()[:12], args.out)


### Co-play weight matrix of one session
@router.command(
    "graph weights",
    DATASET,
    arg("--session", required=True, help="session id"),
    arg("--as-of", type=int, dest="as_of", help="count co-play before this year instead of the session year"),
    arg("--out", type=Path, help="CSV file; standard output when omitted"),
    help="print a session's weight matrix",
)
def graph_weights(args: argparse.Namespace) -> None:
    d = get_dataset(args.dataset)
    s = d[args.session]
    if args.as_of is not None:
        s = s.model_copy(update={"year": args.as_of})
    matrix = session_weight_matrix(get_index(d), s)
    if args.out is None:
        matrix.to_csv(sys.stdout, lineterminator="\n")
    else:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        matrix.to_csv(args.out, lineterminator="\n")


### Per-session triad census
@router.command("census", DATASET, THETA, OUT, help="classify the triads of every session")
def census(args: argparse.Namespace) -> None:
    digest = stage_digest([args.dataset], theta=args.theta)
    if up_to_date(args.out, digest):
        return
    d = get_dataset(args.dataset)
    write_frame(census_table(census_sessions(d, get_index(d), args.theta).values()), args.out)
    mark_current(args.out, digest)


@router.command(
    "closure-curve",
    DATASET,
    THETA,
    arg("--quantiles", type=int, default=10_000),
    arg("--window", type=int, help="moving average width in quantiles"),
    OUT,
    help="closure probability by minimal legs weight quantile",
)
def closure(args: argparse.Namespace) -> None:
    digest = stage_digest([args.dataset], theta=args.theta, quantiles=args.quantiles, window=args.window)
    if up_to_date(args.out, digest):
        return
    d = get_dataset(args.dataset)
    curve = closure_curve(triplet_frame(d, get_index(d), args.theta), args.quantiles, args.window)
    write_frame(curve, args.out)
    mark_current(args.out, digest)


### Null-model worlds
@router.command(
    "rewire",
    DATASET,
    arg("--worlds", type=int, default=100),
    arg("--window", type=int, default=DEFAULT_WINDOW, help="rewiring window in years"),
    arg("--seed", type=int, required=True, help="master seed"),
    arg("--qualification", choices=("span", "both_years"), default="span"),
    arg("--repair-attempts", type=int, default=DEFAULT_REPAIR_ATTEMPTS, dest="repair_attempts"),
    arg("--jobs", type=int, default=settings.N_JOBS),
    OUT,
    help="draw rewired worlds and write one table and manifest per world",
)
def rewire(args: argparse.Namespace) -> None:
    index_path = args.out / "worlds.csv"
    digest = stage_digest(
        [args.dataset],
        worlds=args.worlds,
        window=args.window,
        seed=args.seed,
        qualification=args.qualification,
        repair_attempts=args.repair_attempts,
    )
    if up_to_date(index_path, digest):
        return
    d = get_dataset(args.dataset)
    worlds = generate_ensemble(
        d,
        n_worlds=args.worlds,
        window_years=args.window,
        master_seed=args.seed,
        qualification=args.qualification,
        repair_attempts=args.repair_attempts,
        n_jobs=args.jobs,
    )
    rows = []
    for w in worlds:
        save_world(d, w, args.out)
        report = verify_world(d, w)
        rows.append(
            {
                "world": w.index,
                "seed": w.seed,
                "infeasible_slots": w.infeasible_slots,
                "violations": report.total,
            }
        )
    write_frame(pd.DataFrame(rows, columns=["world", "seed", "infeasible_slots", "violations"]), index_path)
    mark_current(index_path, digest)


@router.command(
    "features",
    DATASET,
    arg("--censuses", type=Path, required=True, help="census table written by `census`"),
    THETA,
    arg("--cutoff", type=int, default=2000, help="last session year analysed"),
    arg("--exclude-leaders", type=Path, dest="exclude_leaders", help="file of leader ids, one per line"),
    arg("--top-k", type=int, default=200, dest="top_k"),
    arg("--horizon", type=int, default=5),
    arg("--release-offset", type=int, choices=(0, 1), default=0, dest="release_offset"),
    OUT,
    help="assemble the per-session feature table",
)
def features(args: argparse.Namespace) -> None:
    digest = stage_digest(
        [args.dataset, args.censuses, args.exclude_leaders],
        theta=args.theta,
        cutoff=args.cutoff,
        top_k=args.top_k,
        horizon=args.horizon,
        release_offset=args.release_offset,
    )
    if up_to_date(args.out, digest):
        return
    d = get_dataset(args.dataset)
    table = assemble_features(
        d,
        get_index(d),
        get_censuses(args.censuses),
        theta=args.theta,
        cutoff_year=args.cutoff,
        exclusions=read_leader_list(args.exclude_leaders) if args.exclude_leaders else None,
        top_k=args.top_k,
        horizon=args.horizon,
        release_offset=args.release_offset,
    )
    write_frame(table.frame[FEATURE_COLUMNS], args.out)
    write_frame(table.exclusion_frame(), args.out.with_name(args.out.stem + "_exclusions.csv"))
    mark_current(args.out, digest)


MODEL = arg("--model", choices=sorted(MODEL_ALIASES), default="ols")
FIXED_EFFECTS = arg("--fixed-effects", dest="fixed_effects", choices=("leader",), help="absorb leader fixed effects")
FEATURES = arg("--features", type=Path, required=True, help="feature table written by `features`")


### Success models
@router.command(
    "fit",
    FEATURES,
    MODEL,
    FIXED_EFFECTS,
    arg("--max-iter", type=int, default=200, dest="max_iter"),
    OUT,
    help="fit a success model; writes JSON plus a key-value summary next to it",
)
def fit(args: argparse.Namespace) -> None:
    model = resolve_model(args.model, args.fixed_effects)
    digest = stage_digest([args.features], model=model, max_iter=args.max_iter)
    if up_to_date(args.out, digest):
        return
    result = fit_model(get_features(args.features), model, max_iter=args.max_iter)
    write_model(result, args.out)
    args.out.with_suffix(".txt").write_text(result.to_summary(), encoding="utf-8")
    mark_current(args.out, digest)
    logger.info("%s fit on %d sessions written to %s", model, result.n_obs, args.out)


@router.command(
    "permute",
    FEATURES,
    MODEL,
    FIXED_EFFECTS,
    arg("--n", type=int, default=10_000, help="number of permutations"),
    arg("--subsample", type=int, help="rows drawn before permuting"),
    arg("--seed", type=int, default=0),
    OUT,
    help="permutation p-values of a success model",
)
def permute(args: argparse.Namespace) -> None:
    model = resolve_model(args.model, args.fixed_effects)
    digest = stage_digest([args.features], model=model, n=args.n, subsample=args.subsample, seed=args.seed)
    if up_to_date(args.out, digest):
        return
    frame = get_features(args.features)
    result = permutation_pvalues(MODELS[model][0], success_design(frame, model), args.n, args.subsample, args.seed)
    table = pd.DataFrame(
        {
            "term": list(result.p_values),
            "coefficient": [result.observed[name] for name in result.p_values],
            "exceedances": [result.exceedances[name] for name in result.p_values],
            "p_value": list(result.p_values.values()),
        }
    )
    write_frame(table, args.out)
    write_kv(
        {
            "n_permutations": result.n_permutations,
            "n_success": result.n_success,
            "failures": result.failures,
            "n_obs": result.n_obs,
        },
        args.out.with_suffix(".txt"),
    )
    mark_current(args.out, digest)


@router.command(
    "margins",
    arg("--fit", type=Path, required=True, help="fit JSON written by `fit`"),
    arg("--vary", default="d_forbidden"),
    arg("--grid", default="0:1:0.01", help="low:high:step or comma-separated values"),
    arg("--at", action="append", default=[], metavar="NAME=VALUE", help="hold a regressor fixed"),
    OUT,
    help="predicted outcome along one regressor, others at their means",
)
def margins(args: argparse.Namespace) -> None:
    at = {}
    for item in args.at:
        name, _, value = item.partition("=")
        if not value:
            raise ConfigError(f"--at expects NAME=VALUE, got {item!r}")
        at[name.strip()] = float(value)
    write_frame(marginal_predictions(get_fit(args.fit), args.vary, parse_grid(args.grid), at or None), args.out)


### Whole analysis
@router.command(
    "pipeline run",
    arg("--config", type=Path, required=True, help="flat key = value configuration file"),
    arg("--out", type=Path, default=Path(settings.OUTPUT_DIR)),
    help="run every stage and write a manifest",
)
def pipeline_run(args: argparse.Namespace) -> None:
    bundle = run_pipeline(get_config(args.config), args.out)
    logger.info("Pipeline finished: %d files in %s", len(bundle.manifest.files), bundle.out_dir)


@router.command(
    "pipeline robustness",
    arg("--config", type=Path, required=True),
    arg("--out", type=Path, default=Path(settings.OUTPUT_DIR)),
    help="refit the success models under each sensitivity sweep",
)
def pipeline_robustness(args: argparse.Namespace) -> None:
    bundle = robustness_suite(get_config(args.config), args.out)
    logger.info("Robustness sweeps finished: %s", ", ".join(sorted(bundle.robustness)) or "none")
