"""Command-line entry point: ``python -m mixed_trees <command>``.

Commands read a long-format CSV and an optional YAML run config, and write
every artifact plus a ``manifest.json`` into one output directory. Exit codes:
0 success, 2 input or config error, 3 fit or runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from mixed_trees.config import CONFIG
from mixed_trees.data import dataset as data_mod
from mixed_trees.data.dataset import ColumnSchema, PanelDataset
from mixed_trees.errors import DataError, FitError
from mixed_trees.evaluators.cross_validation import compare, cross_validate
from mixed_trees.generators import synthgen
from mixed_trees.generators.synthgen import DgpSpec
from mixed_trees.mixed import lmm, merf
from mixed_trees.models import (
    FittedModel,
    ModelSpec,
    dump_model,
    fit_spec,
    load_model,
    spec_label,
    used_variables,
    with_seed,
)
from mixed_trees.trees import cart
from mixed_trees.utils.io import atomic_write_text
from mixed_trees.utils.manifest import write_manifest
from mixed_trees.utils.report_generator import (
    render_table,
    write_frame_csv,
    write_json_report,
    write_rows_csv,
    write_text_report,
)

logger = logging.getLogger(__name__)


# --- run config -------------------------------------------------------------


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Strict):
    path: Optional[str] = None
    subject: str = Field(default_factory=lambda: CONFIG.subject_col)
    wave: str = Field(default_factory=lambda: CONFIG.wave_col)
    response: str = Field(default_factory=lambda: CONFIG.response_col)
    predictors: Optional[List[str]] = None
    # person-mean centered before fitting
    center: List[str] = Field(default_factory=list)
    # pair each row's predictors with the subject's next response
    prospective: bool = False
    delimiter: str = ","
    missing_marker: str = Field(default_factory=lambda: CONFIG.missing_marker)

    def column_schema(self) -> ColumnSchema:
        return ColumnSchema(
            subject=self.subject,
            wave=self.wave,
            response=self.response,
            predictors=self.predictors,
            delimiter=self.delimiter,
            missing_marker=self.missing_marker,
        )


class CvConfig(_Strict):
    k: int = Field(default_factory=lambda: CONFIG.cv_k, ge=2)
    mode: Literal["subject", "observation"] = "subject"
    baseline: str = "lmm"
    n_jobs: Optional[int] = None


class SimulateConfig(_Strict):
    preset: Optional[str] = None
    spec: Optional[DgpSpec] = None
    m: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _one_source(self) -> "SimulateConfig":
        if self.preset is not None and self.spec is not None:
            raise ValueError("give either simulate.preset or simulate.spec, not both")
        return self


class RunConfig(_Strict):
    seed: Optional[int] = Field(default=None, ge=0)
    out: Optional[str] = None
    data: DataConfig = Field(default_factory=DataConfig)
    models: List[ModelSpec] = Field(default_factory=list)
    cv: CvConfig = Field(default_factory=CvConfig)
    simulate: SimulateConfig = Field(default_factory=SimulateConfig)

    @model_validator(mode="after")
    def _unique_labels(self) -> "RunConfig":
        labels = [spec_label(spec) for spec in self.models]
        dupes = sorted({label for label in labels if labels.count(label) > 1})
        if dupes:
            raise ValueError(f"model labels must be unique; repeated: {dupes} (set 'label' to tell them apart)")
        return self


def load_run_config(path: Optional[Path]) -> RunConfig:
    if path is None:
        return RunConfig()
    if not path.is_file():
        raise FileNotFoundError(f"Config file not found: {path}")
    payload = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    if not isinstance(payload, dict):
        raise DataError(f"Config file {path} must hold a mapping at the top level")
    return RunConfig.model_validate(payload)


# --- shared steps -----------------------------------------------------------


class _Run:
    """Resolved inputs of one command invocation."""

    def __init__(self, args: argparse.Namespace) -> None:
        self.command: str = args.command
        self.config_path: Optional[Path] = args.config
        self.cfg = load_run_config(args.config)
        seed = args.seed if args.seed is not None else self.cfg.seed
        self.seed: int = CONFIG.seed if seed is None else seed
        out = args.out or self.cfg.out
        self.out = Path(out) if out else CONFIG.output_dir
        data = getattr(args, "data", None) or self.cfg.data.path
        self.data_path: Optional[Path] = Path(data) if data else None
        self.inputs: List[Path] = [p for p in (self.config_path,) if p is not None]
        self.outputs: List[Path] = []

    def load_data(self, require_response: bool = True) -> PanelDataset:
        if self.data_path is None:
            raise DataError("No data file given; pass --data or set data.path in the config")
        ds = data_mod.load_csv(self.data_path, self.cfg.data.column_schema(), require_response=require_response)
        self.inputs.append(self.data_path)
        if self.cfg.data.center:
            ds = data_mod.person_mean_center(ds, self.cfg.data.center)
        if self.cfg.data.prospective:
            ds = data_mod.prospective(ds)
        return ds

    def models(self) -> List[ModelSpec]:
        if not self.cfg.models:
            raise DataError("No models configured; list them under 'models' in the run config")
        return [with_seed(spec, self.seed) for spec in self.cfg.models]

    def wrote(self, path: Path) -> Path:
        self.outputs.append(path)
        return path

    def finish(self, config: Optional[Dict[str, Any]] = None) -> None:
        payload = self.cfg.model_dump(mode="json")
        payload.update(config or {})
        write_manifest(self.out, self.command, self.seed, self.inputs, self.outputs, payload)


def _complete_rows(ds: PanelDataset, names: Sequence[str]) -> Tuple[PanelDataset, int]:
    kept, report = data_mod.drop_missing(ds, list(dict.fromkeys(names)))
    if report.n_dropped:
        logger.warning(f"Dropped {report.n_dropped} rows with missing values in {report.variables}")
    return kept, report.n_dropped


# --- commands ---------------------------------------------------------------


def cmd_summarize(run: _Run) -> int:
    ds = run.load_data()
    stats = data_mod.summarize(ds)
    run.wrote(write_frame_csv(stats.to_frame(), run.out / "stats.csv"))
    run.wrote(write_json_report(stats, run.out / "stats.json"))
    rows = [
        [v.name, v.n, v.n_missing, v.min, v.max, v.mean, v.sd]
        for v in stats.variables
    ]
    print(render_table(rows, ["Variable", "n", "missing", "min", "max", "mean", "sd"]))
    print(f"Wave counts: {stats.wave_counts}")
    run.finish()
    return 0


def _write_fit_artifacts(run: _Run, fitted: FittedModel) -> None:
    target = run.out / fitted.label
    run.wrote(atomic_write_text(target / "model.json", dump_model(fitted) + "\n"))
    if fitted.family == "lmm":
        run.wrote(write_frame_csv(lmm.wald_frame(fitted.model), target / "wald.csv"))
    tree = fitted.tree
    if tree is not None:
        run.wrote(atomic_write_text(target / "tree.dot", cart.export_dot(tree)))
    if fitted.family == "merf":
        rows = [{"variable": name, "importance": score} for name, score in merf.importance(fitted.model)]
        run.wrote(write_rows_csv(rows, ["variable", "importance"], target / "importance.csv"))
    table = fitted.extras.get("cp_table")
    if table is not None:
        columns = ["cp_value", "n_leaves", "cv_error_mean", "cv_error_se"]
        run.wrote(write_rows_csv(table.to_rows(), columns, target / "cp_table.csv"))
    test = fitted.extras.get("ar1_test")
    if test is not None:
        run.wrote(write_json_report(test, target / "ar1_test.json"))


def cmd_fit(run: _Run) -> int:
    ds = run.load_data()
    for spec in run.models():
        subset, _ = _complete_rows(ds, used_variables(spec, ds))
        print(f"Fitting {spec_label(spec)} ({spec.family}) on {subset.n_rows} rows")
        fitted = fit_spec(subset, spec)
        _write_fit_artifacts(run, fitted)
        if fitted.loglik is not None:
            print(f"  log-likelihood ({fitted.loglik_kind}): {fitted.loglik:.3f}")
    run.finish()
    return 0


def cmd_cv(run: _Run, k: Optional[int], mode: Optional[str]) -> int:
    ds = run.load_data()
    specs = run.models()
    names: List[str] = []
    for spec in specs:
        names += used_variables(spec, ds)
    ds, n_dropped = _complete_rows(ds, names)
    cv = run.cfg.cv
    k = k if k is not None else cv.k
    mode = mode or cv.mode
    folds = data_mod.make_folds(ds, k, mode, run.seed)
    print(f"{k} {mode}-grouped folds, sizes {folds.fold_sizes()}")

    reports = []
    for spec in specs:
        report = cross_validate(ds, spec, folds, n_jobs=cv.n_jobs, n_dropped=n_dropped)
        run.wrote(write_json_report(report, run.out / f"cv_{report.label}.json"))
        reports.append(report)
    table = compare(reports, baseline=cv.baseline)
    run.wrote(write_json_report(table, run.out / "comparison.json"))
    text = table.to_text()
    run.wrote(write_text_report(text, run.out / "comparison.txt"))
    print(text, end="")
    run.finish({"cv_effective": {"k": k, "mode": mode}})

    if all(report.mean_mae is None for report in reports):
        print("error: every model failed in every fold", file=sys.stderr)
        return 3
    if not table.complete:
        print("warning: some folds failed; see the per-model reports", file=sys.stderr)
    return 0


def cmd_simulate(run: _Run, preset_name: Optional[str], m: Optional[int]) -> int:
    sim = run.cfg.simulate
    if preset_name is not None:
        spec = synthgen.preset(preset_name)
    elif sim.spec is not None:
        spec = sim.spec
    else:
        spec = synthgen.preset(sim.preset or "paper-shape")
    m = m if m is not None else sim.m
    if m is not None:
        spec = synthgen.with_subjects(spec, m)
    spec = spec.model_copy(update={"seed": run.seed})
    ds, truth = synthgen.generate(spec)
    run.wrote(data_mod.write_csv(ds, run.out / "dataset.csv", missing_marker=run.cfg.data.missing_marker))
    run.wrote(write_json_report(truth, run.out / "truth.json"))
    print(f"Simulated {ds.n_rows} rows for {len(ds.subjects)} subjects; wave counts {synthgen.wave_counts(ds)}")
    run.finish()
    return 0


def cmd_predict(run: _Run, model_path: Path) -> int:
    if not model_path.is_file():
        raise FileNotFoundError(f"Model file not found: {model_path}")
    fitted = load_model(model_path.read_text(encoding="utf-8"))
    run.inputs.append(model_path)
    ds = run.load_data(require_response=False)
    pred = fitted.predict(ds)
    if fitted.family == "cart":
        flag = np.full(ds.n_rows, "population", dtype=object)
    else:
        flag = np.where(pred.seen, "seen", "unseen").astype(object)
    rows = [
        {ds.subject_name: s, ds.time_name: int(w), "prediction": float(v), "flag": f}
        for s, w, v, f in zip(ds.subject_ids.tolist(), ds.waves.tolist(), pred.values.tolist(), flag.tolist())
    ]
    columns = [ds.subject_name, ds.time_name, "prediction", "flag"]
    run.wrote(write_rows_csv(rows, columns, run.out / "predictions.csv"))
    print(f"Wrote {len(rows)} predictions ({pred.n_unseen} without a random effect)")
    run.finish()
    return 0


# --- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixed_trees", description="Mixed-effects trees for longitudinal panels.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, data: bool = True) -> None:
        if data:
            p.add_argument("--data", type=Path, default=None, help="Long-format CSV input.")
        p.add_argument("--config", type=Path, default=None, help="YAML run config.")
        p.add_argument("--out", type=Path, default=None, help="Output directory.")
        p.add_argument("--seed", type=int, default=None, help="Master seed; overrides model seeds.")

    common(sub.add_parser("summarize", help="Descriptive statistics per variable."))
    common(sub.add_parser("fit", help="Fit every configured model on all rows."))
    cv = sub.add_parser("cv", help="Cross-validate configured models and compare them.")
    common(cv)
    cv.add_argument("--k", type=int, default=None, help="Number of folds.")
    cv.add_argument("--mode", choices=["subject", "observation"], default=None, help="Fold unit.")
    sim = sub.add_parser("simulate", help="Generate a synthetic panel and its truth.")
    common(sim, data=False)
    sim.add_argument("--preset", choices=synthgen.preset_names(), default=None, help="Named DGP preset.")
    sim.add_argument("--m", type=int, default=None, help="Number of subjects.")
    pred = sub.add_parser("predict", help="Predict rows with a saved model.")
    common(pred)
    pred.add_argument("--model", type=Path, required=True, help="Model JSON written by 'fit'.")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=CONFIG.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        run = _Run(args)
        if args.command == "summarize":
            return cmd_summarize(run)
        if args.command == "fit":
            return cmd_fit(run)
        if args.command == "cv":
            return cmd_cv(run, args.k, args.mode)
        if args.command == "simulate":
            return cmd_simulate(run, args.preset, args.m)
        return cmd_predict(run, args.model)
    except (DataError, FileNotFoundError, ValidationError, yaml.YAMLError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except (FitError, np.linalg.LinAlgError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
