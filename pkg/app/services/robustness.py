"""Sensitivity sweeps of the success models.

Each sweep refits the pooled OLS and NB models under one changed setting and
reports the forbidden-triad terms, so tables line up across settings.
"""
import logging
from pathlib import Path

import numpy as np
import pandas as pd
from rich.progress import track

from app.core.config import PipelineConfig
from app.core.logging import console
from app.core.seeds import STAGE_SYNTH
from app.schemas.features import SUCCESS_REGRESSORS
from app.schemas.fit import FitResult
from app.services.features import assemble_features
from app.services.graph import build_index
from app.services.pipeline import PipelineRun, ReportBundle, fit_model, prepare_dataset
from app.services.records import dataset_digest, read_leader_list
from app.services.rewire import compare_forbidden_densities, generate_ensemble, world_census
from app.services.triads import census_sessions
from app.storage.files import write_frame

logger = logging.getLogger(__name__)

SWEEP_MODELS = ("ols", "negbin")
REPORTED_TERMS = ("d_forbidden", "d_forbidden_sq")
SWEEP_COLUMNS = ["sweep", "setting", "model", "term", "coefficient", "std_error", "p_value", "n_obs"]


def _rows(sweep: str, setting, model: str, fit: FitResult) -> list[dict]:
    return [
        {
            "sweep": sweep,
            "setting": str(setting),
            "model": model,
            "term": term,
            "coefficient": fit.coefficients[term],
            "std_error": fit.std_errors[term],
            "p_value": fit.p_values[term],
            "n_obs": fit.n_obs,
        }
        for term in REPORTED_TERMS
        if term in fit.coefficients
    ]


class RobustnessSuite:
    def __init__(self, cfg: PipelineConfig, run: PipelineRun):
        self.cfg = cfg
        self.run = run
        self.d = prepare_dataset(cfg)
        self.ix = build_index(self.d)
        self._censuses = {}

    def censuses(self, theta: int):
        if theta not in self._censuses:
            self._censuses[theta] = census_sessions(self.d, self.ix, theta)
        return self._censuses[theta]

    def features(self, theta: int | None = None, cutoff: int | None = None, excluded=frozenset()):
        theta = theta or self.cfg.theta
        return assemble_features(
            self.d,
            self.ix,
            self.censuses(theta),
            theta=theta,
            cutoff_year=cutoff or self.cfg.cutoff_year,
            exclusions=excluded,
            top_k=self.cfg.top_k,
            horizon=self.cfg.horizon,
            release_offset=self.cfg.release_offset,
        ).frame

    def _fit_all(self, sweep: str, setting, frame: pd.DataFrame, regressors=None) -> list[dict]:
        rows = []
        for model in SWEEP_MODELS:
            rows += _rows(sweep, setting, model, fit_model(frame, model, regressors, self.cfg.max_iter))
        return rows

    def without_closed(self) -> pd.DataFrame:
        frame = self.features()
        reduced = [name for name in SUCCESS_REGRESSORS if name not in ("d_closed", "d_closed_sq")]
        rows = self._fit_all("closed_omitted", "full", frame) + self._fit_all("closed_omitted", "without_closed", frame, reduced)
        return pd.DataFrame(rows, columns=SWEEP_COLUMNS)

    def thresholds(self) -> pd.DataFrame:
        rows = []
        for theta in track(self.cfg.theta_sweep, description="Threshold sweep", console=console):
            rows += self._fit_all("theta", theta, self.features(theta=theta))
        return pd.DataFrame(rows, columns=SWEEP_COLUMNS)

    def cutoffs(self) -> pd.DataFrame:
        rows = []
        for cutoff in track(self.cfg.cutoff_sweep, description="Cutoff sweep", console=console):
            rows += self._fit_all("cutoff", cutoff, self.features(cutoff=cutoff))
        return pd.DataFrame(rows, columns=SWEEP_COLUMNS)

    def excluded_leaders(self) -> pd.DataFrame | None:
        if self.cfg.exclude_leaders_path is None:
            self.run.notice("no exclude_leaders_path: leader exclusion sweep skipped")
            return None
        excluded = read_leader_list(self.cfg.exclude_leaders_path)
        rows = self._fit_all("excluded_leaders", "all", self.features(excluded=frozenset()))
        rows += self._fit_all("excluded_leaders", "excluded", self.features(excluded=excluded))
        return pd.DataFrame(rows, columns=SWEEP_COLUMNS)

    def windows(self) -> pd.DataFrame | None:
        """Observed against rewired forbidden density for each rewiring window."""
        if self.cfg.n_worlds == 0:
            self.run.notice("n_worlds = 0: window sweep skipped")
            return None
        observed = self.censuses(self.cfg.theta)
        rows = []
        for window in [self.cfg.window_years, *self.cfg.window_variants]:
            worlds = generate_ensemble(
                self.d,
                n_worlds=self.cfg.n_worlds,
                window_years=window,
                master_seed=self.cfg.master_seed,
                qualification=self.cfg.qualification,
                repair_attempts=self.cfg.repair_attempts,
                n_jobs=self.cfg.n_jobs,
            )
            comparison = compare_forbidden_densities(observed, [world_census(self.d, w, self.cfg.theta) for w in worlds])
            rows.append(
                {
                    "window_years": window,
                    "sessions": len(comparison.table),
                    "mean_difference": float(np.mean(comparison.differences)) if len(comparison.table) else float("nan"),
                    "share_rewired_higher": comparison.share_rewired_higher,
                    "infeasible_slots": sum(w.infeasible_slots for w in worlds),
                }
            )
        return pd.DataFrame(rows)


def robustness_suite(cfg: PipelineConfig, out_dir: Path | str) -> ReportBundle:
    """Run every sweep and write one table per sweep plus a manifest."""
    run = PipelineRun(cfg, out_dir)
    run.out_dir.mkdir(parents=True, exist_ok=True)
    tables: dict[str, pd.DataFrame] = {}
    try:
        with run.stage("robustness_setup"):
            suite = RobustnessSuite(cfg, run)
            if cfg.synthetic:
                run.seed("synth", STAGE_SYNTH)
        for name, sweep in (
            ("closed_omitted", suite.without_closed),
            ("theta", suite.thresholds),
            ("cutoff", suite.cutoffs),
            ("excluded_leaders", suite.excluded_leaders),
            ("window", suite.windows),
        ):
            with run.stage(f"robustness_{name}"):
                table = sweep()
                if table is not None:
                    tables[name] = table
                    write_frame(table, run.path(f"robustness_{name}.csv"))
    except Exception:
        run.cleanup()
        raise

    manifest = run.manifest(dataset_digest(suite.d))
    run.write_manifest(manifest)
    logger.info("Robustness suite wrote %d tables", len(tables))
    return ReportBundle(
        out_dir=run.out_dir,
        manifest=manifest,
        censuses=pd.DataFrame(),
        robustness=tables,
    )
