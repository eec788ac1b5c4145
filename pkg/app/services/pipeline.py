"""End-to-end analysis: ingest, census, rewire, compare, features, fits, margins."""
import logging
import platform
from collections.abc import Callable, Iterator
from contextlib import contextmanager
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np
import pandas as pd

from app.core.config import PipelineConfig
from app.core.exceptions import StageError
from app.core.seeds import (
    STAGE_MATCHED_SAMPLE,
    STAGE_PERMUTATION,
    STAGE_REWIRE,
    STAGE_SYNTH,
    derive_seed,
)
from app.schemas.census import Origin, SessionCensus
from app.schemas.features import SQUARED_TERMS, SUCCESS_REGRESSORS
from app.schemas.fit import FitResult
from app.schemas.pipeline import Manifest
from app.schemas.records import Dataset
from app.schemas.world import RewiredWorld
from app.services.features import FeatureTable, assemble_features
from app.services.graph import CoPlayIndex, build_index
from app.services.records import dataset_digest, filter_dataset, load_dataset, read_leader_list, save_dataset
from app.services.rewire import (
    DensityComparison,
    compare_forbidden_densities,
    generate_ensemble,
    verify_world,
    world_index,
)
from app.services.synth import synth_corpus
from app.services.triads import (
    census_sessions,
    census_table,
    class_shares,
    closure_curve,
    triplet_frame,
)
from app.stats.design import DesignMatrix
from app.stats.glm import fe_negbin_fit, logit_fit, matched_closure_sample, negbin_fit
from app.stats.inference import ks_two_sample, permutation_pvalues, wilcoxon_signed_rank
from app.stats.linear import categorical_means, fe_ols_fit, ols_fit, pearson_matrix, power_sequence_r2, vif
from app.stats.margins import (
    bivariate_quadratic,
    grid_from_step,
    leader_interaction_fit,
    marginal_predictions,
)
from app.stats.smoothing import kde_epanechnikov, lowess_frame
from app.storage.files import sha256_file, write_frame, write_json, write_kv, write_model

logger = logging.getLogger(__name__)

DENSITIES = ("d_forbidden", "d_closed", "d_open")
MARGIN_TERMS = ("d_forbidden", "d_closed", "median_tie_strength")
PACKAGES = ("numpy", "pandas", "pydantic", "pydantic-settings", "rich", "scipy")

# model name -> (fitter, outcome column, leader fixed effects)
MODELS: dict[str, tuple[Callable[[DesignMatrix], FitResult], str, bool]] = {
    "ols": (ols_fit, "log10_releases", False),
    "negbin": (negbin_fit, "releases", False),
    "fe_ols": (fe_ols_fit, "log10_releases", True),
    "fe_negbin": (fe_negbin_fit, "releases", True),
}


def package_versions() -> dict[str, str]:
    versions = {"python": platform.python_version()}
    for package in PACKAGES:
        try:
            versions[package] = metadata.version(package)
        except metadata.PackageNotFoundError:
            versions[package] = "unknown"
    return versions


def usable_regressors(frame: pd.DataFrame, regressors: list[str]) -> list[str]:
    """Regressors that vary in `frame`; constant ones are logged and left out."""
    constant = [name for name in regressors if frame[name].nunique() < 2]
    if constant:
        logger.warning("Leaving out regressors without variation: %s", ", ".join(constant))
    return [name for name in regressors if name not in constant]


def success_design(frame: pd.DataFrame, model: str, regressors: list[str] | None = None) -> DesignMatrix:
    _, outcome, fixed_effects = MODELS[model]
    regressors = usable_regressors(frame, list(regressors or SUCCESS_REGRESSORS))
    return DesignMatrix.from_frame(
        frame,
        outcome=outcome,
        regressors=regressors,
        constant=True,
        groups="leader_id" if fixed_effects else None,
        products=SQUARED_TERMS,
    )


def fit_model(frame: pd.DataFrame, model: str, regressors: list[str] | None = None, max_iter: int = 200) -> FitResult:
    fitter = MODELS[model][0]
    design = success_design(frame, model, regressors)
    if fitter in (negbin_fit, fe_negbin_fit):
        return fitter(design, max_iter=max_iter)
    return fitter(design)


def prepare_dataset(cfg: PipelineConfig) -> Dataset:
    if cfg.synthetic:
        return synth_corpus(cfg.synth, derive_seed(cfg.master_seed, STAGE_SYNTH))
    if cfg.sessions_path is None or cfg.personnel_path is None:
        raise ValueError("no dataset configured: set sessions_path and personnel_path, or synthetic = true")
    return load_dataset(cfg.sessions_path, cfg.personnel_path, cfg.records_path)


@dataclass
class ReportBundle:
    out_dir: Path
    manifest: Manifest
    censuses: pd.DataFrame
    closure_curves: dict[str, pd.DataFrame] = field(default_factory=dict)
    density_comparison: DensityComparison | None = None
    density_tests: dict[str, float] = field(default_factory=dict)
    features: FeatureTable | None = None
    correlations: pd.DataFrame | None = None
    fits: dict[str, FitResult] = field(default_factory=dict)
    vif: pd.DataFrame | None = None
    margins: pd.DataFrame | None = None
    leader_fit: FitResult | None = None
    robustness: dict[str, pd.DataFrame] = field(default_factory=dict)


class PipelineRun:
    """One run writing into `out_dir`; files of a failed run are removed."""

    def __init__(self, cfg: PipelineConfig, out_dir: Path | str):
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.written: list[Path] = []
        self.seeds: dict[str, int] = {}
        self.stages: list[str] = []
        self.notices: list[str] = []

    # ------------------------------------------------------------ bookkeeping

    def path(self, name: str) -> Path:
        path = self.out_dir / name
        self.written.append(path)
        return path

    def notice(self, text: str) -> None:
        logger.warning(text)
        self.notices.append(text)

    def seed(self, label: str, stage: int, counter: int = 0) -> int:
        value = derive_seed(self.cfg.master_seed, stage, counter)
        self.seeds[label] = value
        return value

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        logger.info("Stage %s started", name)
        try:
            yield
        except StageError:
            raise
        except Exception as error:
            raise StageError(name, error) from error
        self.stages.append(name)
        logger.info("Stage %s finished", name)

    def cleanup(self) -> None:
        for path in self.written:
            path.unlink(missing_ok=True)
        logger.info("Removed %d files of the failed run", len(self.written))

    def manifest(self, dataset_digest: str) -> Manifest:
        files = {
            path.relative_to(self.out_dir).as_posix(): sha256_file(path)
            for path in sorted(set(self.written))
            if path.exists()
        }
        return Manifest(
            config_digest=self.cfg.digest(),
            config=self.cfg.to_flat(),
            dataset_digest=dataset_digest,
            master_seed=self.cfg.master_seed,
            seeds=dict(sorted(self.seeds.items())),
            versions=package_versions(),
            files=files,
            stages=self.stages,
            notices=self.notices,
        )

    def write_manifest(self, manifest: Manifest) -> None:
        write_json(manifest.model_dump(), self.out_dir / "manifest.json")

    # ------------------------------------------------------------ stages

    def ingest(self) -> tuple[Dataset, CoPlayIndex]:
        with self.stage("ingest"):
            d = prepare_dataset(self.cfg)
            if self.cfg.synthetic:
                self.seeds["synth"] = derive_seed(self.cfg.master_seed, STAGE_SYNTH)
            sessions, personnel = save_dataset(d, self.out_dir / "dataset")
            self.written += [sessions, personnel]
        with self.stage("graph"):
            ix = build_index(d)
        return d, ix

    def census(self, d: Dataset, ix: CoPlayIndex) -> tuple[dict[str, SessionCensus], pd.DataFrame]:
        with self.stage("census"):
            censuses = census_sessions(d, ix, self.cfg.theta)
            table = census_table(censuses.values())
            write_frame(table, self.path("censuses.csv"))
            observed = triplet_frame(d, ix, self.cfg.theta, Origin.observed)
        return censuses, observed

    def closure(self, name: str, triads: pd.DataFrame) -> pd.DataFrame:
        n_quantiles = self.cfg.quantiles
        if len(triads) < n_quantiles:
            self.notice(f"{name} closure curve: {len(triads)} triads, quantiles capped from {n_quantiles}")
            n_quantiles = len(triads)
        curve = closure_curve(triads, n_quantiles, self.cfg.smoothing_window)
        write_frame(curve, self.path(f"closure_curve_{name}.csv"))
        return curve

    def rewire(self, d: Dataset) -> list[RewiredWorld]:
        with self.stage("rewire"):
            for i in range(self.cfg.n_worlds):
                self.seeds[f"rewire.{i:03d}"] = derive_seed(self.cfg.master_seed, STAGE_REWIRE, i)
            worlds = generate_ensemble(
                d,
                n_worlds=self.cfg.n_worlds,
                window_years=self.cfg.window_years,
                master_seed=self.cfg.master_seed,
                qualification=self.cfg.qualification,
                repair_attempts=self.cfg.repair_attempts,
                n_jobs=self.cfg.n_jobs,
            )
            rows = []
            for w in worlds:
                report = verify_world(d, w)
                if not report.ok:
                    raise ValueError(f"world {w.index} violates {report.total} constraints")
                rows.append(
                    {
                        "world": w.index,
                        "seed": str(w.seed),
                        "slots": w.n_slots,
                        "infeasible_slots": w.infeasible_slots,
                        "violations": report.total,
                    }
                )
            write_frame(pd.DataFrame(rows), self.path("worlds.csv"))
        return worlds

    def rewired_censuses(
        self, d: Dataset, worlds: list[RewiredWorld]
    ) -> tuple[list[dict[str, SessionCensus]], pd.DataFrame]:
        with self.stage("rewired_census"):
            per_world, triads = [], []
            for w in worlds:
                rewired, ix = world_index(d, w)
                per_world.append(census_sessions(rewired, ix, self.cfg.theta))
                triads.append(triplet_frame(rewired, ix, self.cfg.theta, Origin.rewired, w.index))
            pooled = pd.concat(triads, ignore_index=True)
        return per_world, pooled

    def closure_logit(self, observed: pd.DataFrame, rewired: pd.DataFrame) -> FitResult:
        with self.stage("closure_logit"):
            if len(rewired) < len(observed):
                self.notice(
                    f"closure logit: {len(rewired)} rewired triads cannot match {len(observed)} observed ones; "
                    f"observed side drawn down to {len(rewired)}"
                )
                rng = np.random.default_rng(self.seed("matched_sample.observed", STAGE_MATCHED_SAMPLE, 1))
                observed = observed.iloc[np.sort(rng.choice(len(observed), size=len(rewired), replace=False))]
            design = matched_closure_sample(
                observed, rewired, self.seed("matched_sample", STAGE_MATCHED_SAMPLE)
            )
            fit = logit_fit(design, max_iter=self.cfg.max_iter)
            permutation = permutation_pvalues(
                lambda X: logit_fit(X, max_iter=self.cfg.max_iter),
                design,
                self.cfg.n_permutations,
                subsample=self.cfg.permutation_subsample,
                seed=self.seed("permutation", STAGE_PERMUTATION),
                strata="observed",
            )
            fit = fit.model_copy(
                update={
                    "permutation_p_values": permutation.p_values,
                    "permutation_failures": permutation.failures,
                }
            )
            self.path("closure_logit.txt").write_text(fit.to_summary(), encoding="utf-8")
            write_model(fit, self.path("closure_logit.json"))
            top = max(2, int(np.percentile(observed["w2"], 99)))
            grid = np.arange(1, top + 1)
            predictions = pd.concat(
                [
                    marginal_predictions(fit, "min_legs_weight", grid, at={"observed": flag}).assign(
                        origin="observed" if flag else "rewired"
                    )
                    for flag in (1.0, 0.0)
                ],
                ignore_index=True,
            )
            write_frame(predictions, self.path("closure_logit_predictions.csv"))
        return fit

    def compare_densities(
        self, observed: dict[str, SessionCensus], worlds: list[dict[str, SessionCensus]]
    ) -> tuple[DensityComparison, dict[str, float]]:
        with self.stage("density_comparison"):
            comparison = compare_forbidden_densities(observed, worlds)
            write_frame(comparison.table, self.path("density_comparison.csv"))
            tests: dict[str, float] = {
                "sessions": len(comparison.table),
                "share_rewired_higher": comparison.share_rewired_higher,
            }
            if len(comparison.table) >= 2:
                differences = comparison.differences
                curves = []
                for series, values in (
                    ("difference", differences),
                    ("observed", comparison.table["observed"].to_numpy()),
                    ("rewired", comparison.table["rewired_mean"].to_numpy()),
                ):
                    kde = kde_epanechnikov(values, self.cfg.kde_bandwidth)
                    curves.append(kde.grid().assign(series=series, bandwidth=kde.bandwidth))
                write_frame(pd.concat(curves, ignore_index=True), self.path("density_kde.csv"))
                wilcoxon = wilcoxon_signed_rank(differences)
                ks = ks_two_sample(comparison.table["observed"], comparison.table["rewired_mean"])
                tests.update(
                    {
                        "wilcoxon_statistic": wilcoxon.statistic,
                        "wilcoxon_z": wilcoxon.z,
                        "wilcoxon_p": wilcoxon.p_value,
                        "wilcoxon_p_less": wilcoxon.p_less,
                        "wilcoxon_exact": wilcoxon.exact,
                        "ks_statistic": ks.statistic,
                        "ks_p": ks.p_value,
                    }
                )
            else:
                self.notice("fewer than two sessions with forbidden triads; density tests skipped")
            write_kv(tests, self.path("density_tests.txt"))
        return comparison, tests

    def features(self, d: Dataset, ix: CoPlayIndex, censuses: dict[str, SessionCensus]) -> FeatureTable:
        with self.stage("features"):
            excluded = read_leader_list(self.cfg.exclude_leaders_path) if self.cfg.exclude_leaders_path else set()
            table = assemble_features(
                d,
                ix,
                censuses,
                theta=self.cfg.theta,
                cutoff_year=self.cfg.cutoff_year,
                exclusions=excluded,
                top_k=self.cfg.top_k,
                horizon=self.cfg.horizon,
                release_offset=self.cfg.release_offset,
            )
            write_frame(table.frame, self.path("features.csv"))
            write_frame(table.exclusion_frame(), self.path("exclusions.csv"))
        return table

    def bivariate(self, d: Dataset, ix: CoPlayIndex, table: FeatureTable) -> pd.DataFrame:
        with self.stage("bivariate"):
            frame = table.frame
            grid = grid_from_step(self.cfg.margins_step)
            y = frame["log10_releases"].to_numpy(float)
            correlations = pearson_matrix(frame[[*SUCCESS_REGRESSORS, "log10_releases"]])
            write_frame(correlations.reset_index(names="variable"), self.path("correlations.csv"))
            curves, bins, smooth, powers = [], [], [], []
            for name in DENSITIES:
                x = frame[name].to_numpy(float)
                curves.append(bivariate_quadratic(x, y, grid, name).assign(density=name))
                bins.append(categorical_means(x, y).assign(density=name))
                smooth.append(lowess_frame(x, y, self.cfg.lowess_f).assign(density=name))
                powers.append(power_sequence_r2(x, y).assign(density=name))
            write_frame(pd.concat(curves, ignore_index=True), self.path("bivariate_quadratic.csv"))
            write_frame(pd.concat(bins, ignore_index=True), self.path("bivariate_categorical.csv"))
            write_frame(pd.concat(smooth, ignore_index=True), self.path("bivariate_lowess.csv"))
            write_frame(pd.concat(powers, ignore_index=True), self.path("power_sequence.csv"))

            sweep = []
            for theta in self.cfg.theta_sweep:
                censuses = census_sessions(d, ix, theta)
                rows = frame["session_id"].map(lambda sid: censuses[sid].d_forbidden)
                sweep.append(bivariate_quadratic(rows.to_numpy(float), y, grid, "d_forbidden").assign(theta=theta))
            write_frame(pd.concat(sweep, ignore_index=True), self.path("bivariate_forbidden_theta.csv"))
        return correlations

    def fits(self, table: FeatureTable) -> tuple[dict[str, FitResult], pd.DataFrame, pd.DataFrame]:
        with self.stage("fits"):
            frame = table.frame
            fits = {model: fit_model(frame, model, max_iter=self.cfg.max_iter) for model in MODELS}
            for model, fit in fits.items():
                self.path(f"fit_{model}.txt").write_text(fit.to_summary(), encoding="utf-8")
                write_model(fit, self.path(f"fit_{model}.json"))
            inflation = vif(success_design(frame, "ols"))
            write_frame(inflation, self.path("vif.csv"))

            margins = []
            for model, fit in fits.items():
                for term in MARGIN_TERMS:
                    if term not in fit.names:
                        continue
                    low, high = (0.0, 1.0) if term.startswith("d_") else (0.0, float(frame[term].quantile(0.99)))
                    grid = np.linspace(low, high, int(round(1 / self.cfg.margins_step)) + 1)
                    margins.append(marginal_predictions(fit, term, grid).assign(model=model, vary=term))
            margins = pd.concat(margins, ignore_index=True)
            write_frame(margins, self.path("margins.csv"))
        return fits, inflation, margins

    def leader_interaction(self, table: FeatureTable) -> FitResult | None:
        leader = self.cfg.focus_leader
        if leader is None:
            return None
        with self.stage("leader_interaction"):
            frame = table.frame
            design = success_design(frame, "negbin")
            flag = (frame["leader_id"] == leader).to_numpy(float)
            fit = leader_interaction_fit(design, flag, lambda X: negbin_fit(X, max_iter=self.cfg.max_iter))
            self.path("fit_leader_interaction.txt").write_text(fit.to_summary(), encoding="utf-8")
            write_model(fit, self.path("fit_leader_interaction.json"))
            grid = grid_from_step(self.cfg.margins_step)
            margins = pd.concat(
                [
                    marginal_predictions(fit, "d_forbidden", grid, at={"leader": value}).assign(leader=int(value))
                    for value in (0.0, 1.0)
                ],
                ignore_index=True,
            )
            write_frame(margins, self.path("margins_leader.csv"))
        return fit

    # ------------------------------------------------------------ driver

    def run(self) -> ReportBundle:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        try:
            d, ix = self.ingest()
            censuses, observed_triads = self.census(d, ix)
            with self.stage("closure_curve"):
                curves = {"observed": self.closure("observed", observed_triads)}
                shares = {f"observed.{k}": v for k, v in class_shares(observed_triads).items()}

            comparison, tests = None, {}
            if self.cfg.n_worlds > 0:
                worlds = self.rewire(d)
                world_censuses, rewired_triads = self.rewired_censuses(d, worlds)
                with self.stage("rewired_closure_curve"):
                    curves["rewired"] = self.closure("rewired", rewired_triads)
                    shares.update({f"rewired.{k}": v for k, v in class_shares(rewired_triads).items()})
                self.closure_logit(observed_triads, rewired_triads)
                comparison, tests = self.compare_densities(censuses, world_censuses)
            else:
                self.notice("n_worlds = 0: rewiring, closure logit and density comparison skipped")
            with self.stage("class_shares"):
                write_kv(shares, self.path("class_shares.txt"))

            table = self.features(d, ix, censuses)
            correlations = self.bivariate(d, ix, table)
            fits, inflation, margins = self.fits(table)
            leader_fit = self.leader_interaction(table)
        except StageError as error:
            logger.error("Pipeline failed in stage %s: %s", error.stage, error.cause)
            self.cleanup()
            raise

        manifest = self.manifest(dataset_digest(d))
        self.write_manifest(manifest)
        logger.info("Pipeline wrote %d files to %s", len(manifest.files), self.out_dir)
        return ReportBundle(
            out_dir=self.out_dir,
            manifest=manifest,
            censuses=census_table(censuses.values()),
            closure_curves=curves,
            density_comparison=comparison,
            density_tests=tests,
            features=table,
            correlations=correlations,
            fits=fits,
            vif=inflation,
            margins=margins,
            leader_fit=leader_fit,
        )


def run_pipeline(cfg: PipelineConfig, out_dir: Path | str) -> ReportBundle:
    return PipelineRun(cfg, out_dir).run()
