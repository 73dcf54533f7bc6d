"""Simulation study runner: generate, fit every estimation variant, select, tabulate."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy
import yaml

from dcmselect.indices import fit_indices
from dcmselect.metrics import (
    classification_rates,
    classify_examinees,
    compute_bias_rmse,
    parameter_class,
)
from dcmselect.model import ModelVariant, format_key
from dcmselect.sampler import ChainConfig, PriorSpec, run_chains
from dcmselect.simulate import (
    PriorLevel,
    Quality,
    SimCondition,
    derive_seed,
    generate_condition,
)

log = logging.getLogger(__name__)

INDEX_KINDS = ("DIC", "WAIC", "PSIS-LOO")
# parsimony order for ties: fewer parameters first
PARSIMONY = (ModelVariant.DINA, ModelVariant.CRUM, ModelVariant.LCDM)
ALL_VARIANTS = (ModelVariant.LCDM, ModelVariant.DINA, ModelVariant.CRUM)


def select_best(values: Mapping[ModelVariant | str, float], kind: str) -> ModelVariant:
    """Variant preferred by one index.

    DIC and WAIC are minimized, PSIS-LOO (given as ``elpd``) is maximized.
    Exact ties go to the more parsimonious variant.  Non-finite candidates
    are dropped with a log message.
    """
    if kind not in INDEX_KINDS:
        raise ValueError(f"unknown index {kind!r}")
    sign = -1.0 if kind == "PSIS-LOO" else 1.0
    candidates = {}
    for variant, value in values.items():
        variant = ModelVariant.parse(variant)
        if value is None or not math.isfinite(value):
            log.warning("%s: excluding %s (value %r)", kind, variant.value, value)
            continue
        candidates[variant] = sign * float(value)
    if not candidates:
        raise ValueError(f"no finite {kind} values to compare")
    return min(candidates, key=lambda v: (candidates[v], PARSIMONY.index(v)))


def _condition_sort_key(c: SimCondition):
    return (
        list(PriorLevel).index(c.prior_level),
        c.n_examinees,
        list(Quality).index(c.quality),
        ALL_VARIANTS.index(c.generating_variant),
    )


@dataclass
class StudyConfig:
    conditions: list[SimCondition]
    estimation_variants: tuple[ModelVariant, ...] = ALL_VARIANTS
    replications: int = 5
    study_seed: int = 20240101
    chains: ChainConfig = field(default_factory=ChainConfig)
    output_dir: str = "dcm_select_out"
    dina_interaction: str = "recalibrate"
    crum_mains: str = "verbatim"

    def __post_init__(self):
        self.estimation_variants = tuple(ModelVariant.parse(v) for v in self.estimation_variants)
        if not self.estimation_variants:
            raise ValueError("estimation_variants must be nonempty")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if not self.conditions:
            raise ValueError("at least one condition is required")
        self.conditions = sorted(dict.fromkeys(self.conditions), key=_condition_sort_key)

    def to_json(self) -> dict:
        return {
            "conditions": [c.to_json() for c in self.conditions],
            "estimation_variants": [v.value for v in self.estimation_variants],
            "replications": self.replications,
            "study_seed": self.study_seed,
            "chains": asdict(self.chains),
            "dina_interaction": self.dina_interaction,
            "crum_mains": self.crum_mains,
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()


def grid_conditions(
    generators: Iterable = ALL_VARIANTS,
    n: Iterable[int] = (500, 1000),
    quality: Iterable = tuple(Quality),
    prior: Iterable = tuple(PriorLevel),
) -> list[SimCondition]:
    return [
        SimCondition(g, size, q, p)
        for p in prior
        for size in n
        for q in quality
        for g in generators
    ]


PRESETS = {
    # ~1 hour on a laptop
    "desk": {
        "replications": 5,
        "grid": {"n": [500, 1000]},
        "chains": {"burn_in": 1000, "sampling": 1000, "max_auto_extensions": 2},
    },
    # 25 reps, N up to 2000; up to 4,000 burn-in + 8,000 sampling iterations per chain
    "full": {
        "replications": 25,
        "grid": {"n": [500, 1000, 2000]},
        "chains": {"burn_in": 1000, "sampling": 2000, "max_auto_extensions": 2},
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def config_from_dict(raw: Mapping, preset: str | None = None) -> StudyConfig:
    """Build a :class:`StudyConfig` from a parsed config document.

    Keys: ``preset``, ``replications``, ``study_seed``,
    ``estimation_variants``, ``conditions`` (explicit list of
    ``{generator, n, quality, prior}``) or ``grid`` (``generators``, ``n``,
    ``quality``, ``prior`` lists), ``chains`` (:class:`ChainConfig`
    fields), ``generation`` (``dina_interaction``, ``crum_mains``) and
    ``output_dir``.
    """
    raw = dict(raw or {})
    preset = preset or raw.pop("preset", None)
    raw.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        raw = _merge(PRESETS[preset], raw)
    unknown = set(raw) - {
        "replications",
        "study_seed",
        "estimation_variants",
        "conditions",
        "grid",
        "chains",
        "generation",
        "output_dir",
    }
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    if "conditions" in raw:
        conditions = [SimCondition.from_json(c) for c in raw["conditions"]]
    else:
        grid = raw.get("grid", {})
        conditions = grid_conditions(
            generators=grid.get("generators", ALL_VARIANTS),
            n=grid.get("n", (500, 1000)),
            quality=grid.get("quality", tuple(Quality)),
            prior=grid.get("prior", tuple(PriorLevel)),
        )
    generation = raw.get("generation", {})
    kwargs = {}
    for key in ("replications", "study_seed", "output_dir"):
        if key in raw:
            kwargs[key] = raw[key]
    if "estimation_variants" in raw:
        kwargs["estimation_variants"] = tuple(raw["estimation_variants"])
    return StudyConfig(
        conditions=conditions,
        chains=ChainConfig(**raw.get("chains", {})),
        dina_interaction=generation.get("dina_interaction", "recalibrate"),
        crum_mains=generation.get("crum_mains", "verbatim"),
        **kwargs,
    )


def load_config(path: str | Path | None, preset: str | None = None) -> StudyConfig:
    raw = yaml.safe_load(Path(path).read_text()) if path else {}
    return config_from_dict(raw or {}, preset=preset)


@dataclass
class EstimationSummary:
    variant: ModelVariant
    fit_seed: int
    converged: bool
    max_rhat: float
    attempts: int
    burn_in: int
    sampling: int
    acceptance_rate: float
    indices: dict
    classification: dict
    # pointwise elpd vectors, kept for standard errors of differences
    pointwise_elpd_waic: list[float] = field(repr=False, default_factory=list)
    pointwise_elpd_loo: list[float] = field(repr=False, default_factory=list)

    def to_json(self) -> dict:
        return {
            "variant": self.variant.value,
            "fit_seed": self.fit_seed,
            "converged": self.converged,
            "max_rhat": self.max_rhat,
            "attempts": self.attempts,
            "burn_in": self.burn_in,
            "sampling": self.sampling,
            "acceptance_rate": self.acceptance_rate,
            "indices": self.indices,
            "classification": self.classification,
        }


@dataclass
class RunArtifact:
    condition: SimCondition
    replication: int
    seed: int
    fits: dict[ModelVariant, EstimationSummary]
    selections: dict[str, ModelVariant]
    # (parameter name, class, estimate, truth) for the fit matching the generator
    recovery: list[tuple[str, str, float, float]] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return all(f.converged for f in self.fits.values())

    def elpd_difference(self, which: str = "loo") -> tuple[ModelVariant, ModelVariant, float, float] | None:
        """Top two variants by elpd, their elpd difference and its standard error."""
        attr = "pointwise_elpd_loo" if which == "loo" else "pointwise_elpd_waic"
        if len(self.fits) < 2:
            return None
        totals = {v: float(np.sum(getattr(f, attr))) for v, f in self.fits.items()}
        first, second = sorted(totals, key=lambda v: -totals[v])[:2]
        diff = np.asarray(getattr(self.fits[first], attr)) - np.asarray(getattr(self.fits[second], attr))
        se = float(np.sqrt(diff.size * diff.var(ddof=1))) if diff.size > 1 else math.inf
        return first, second, float(diff.sum()), se

    def to_json(self) -> dict:
        return {
            "condition": self.condition.to_json(),
            "condition_id": self.condition.id,
            "replication": self.replication,
            "seed": self.seed,
            "converged": self.converged,
            "selections": {k: v.value for k, v in self.selections.items()},
            "fits": {v.value: f.to_json() for v, f in self.fits.items()},
            "recovery": [
                {"parameter": n, "class": c, "estimate": e, "truth": t}
                for n, c, e, t in self.recovery
            ],
        }


def run_replication(condition: SimCondition, replication: int, config: StudyConfig) -> RunArtifact:
    seed = derive_seed(config.study_seed, condition.id, replication)
    data = generate_condition(
        condition,
        seed,
        dina_interaction=config.dina_interaction,
        crum_mains=config.crum_mains,
    )
    prior = PriorSpec.from_level(condition.prior_level)
    truth_classes = data.profiles
    fits: dict[ModelVariant, EstimationSummary] = {}
    recovery = []
    for variant in config.estimation_variants:
        fit_seed = derive_seed(seed, "fit", variant.value)
        fit = run_chains(data.data, data.qmatrix, variant, prior, config.chains, fit_seed)
        report = fit_indices(fit, data.data)
        calls = classify_examinees(fit.membership_probs(), fit.structure.lattice)
        rates = classification_rates(calls, truth_classes)
        fits[variant] = EstimationSummary(
            variant=variant,
            fit_seed=fit_seed,
            converged=fit.converged,
            max_rhat=fit.convergence.max_rhat,
            attempts=fit.attempts,
            burn_in=fit.config.burn_in,
            sampling=fit.config.sampling,
            acceptance_rate=fit.acceptance_rate(),
            indices=report.to_json(),
            classification=rates.to_json(),
            pointwise_elpd_waic=report.pointwise["elpd_waic_i"].tolist(),
            pointwise_elpd_loo=report.pointwise["elpd_loo_i"].tolist(),
        )
        if variant is condition.generating_variant:
            est = fit.posterior_mean_coef()
            true = fit.structure.to_array(data.params)
            for i, keys in enumerate(fit.structure.keys):
                names = ["intercept"] + [format_key(k) for k in keys]
                for j, name in enumerate(names):
                    recovery.append(
                        (
                            f"item{i + 1}.{name}",
                            parameter_class(int(fit.structure.order[i, j])),
                            float(est[i, j]),
                            float(true[i, j]),
                        )
                    )
    selections = {
        "DIC": select_best({v: f.indices["dic"] for v, f in fits.items()}, "DIC"),
        "WAIC": select_best({v: f.indices["waic"] for v, f in fits.items()}, "WAIC"),
        "PSIS-LOO": select_best({v: f.indices["elpd_psis_loo"] for v, f in fits.items()}, "PSIS-LOO"),
    }
    return RunArtifact(condition, replication, seed, fits, selections, recovery)


def _run_task(args):
    condition, replication, config = args
    try:
        return run_replication(condition, replication, config), None
    except Exception as exc:  # reported per replication, the study carries on
        log.exception("replication %s/%d failed", condition.id, replication)
        return None, f"{condition.id}/{replication}: {type(exc).__name__}: {exc}"


@dataclass
class StudyResult:
    config: StudyConfig
    artifacts: list[RunArtifact]
    failures: list[str] = field(default_factory=list)

    def selection_table(self) -> list[dict]:
        return selection_table(self.artifacts, self.config)

    def recovery_rows(self) -> list[dict]:
        return recovery_rows(self.artifacts)

    def classification_rows(self) -> list[dict]:
        return classification_rows(self.artifacts)


def run_study(config: StudyConfig, jobs: int = 1) -> StudyResult:
    tasks = [(c, r, config) for c in config.conditions for r in range(1, config.replications + 1)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_task, tasks))
    else:
        outcomes = [_run_task(t) for t in tasks]
    artifacts = [a for a, _ in outcomes if a is not None]
    failures = [f for _, f in outcomes if f is not None]
    artifacts.sort(key=lambda a: (_condition_sort_key(a.condition), a.replication))
    return StudyResult(config, artifacts, failures)


def _condition_cols(c: SimCondition) -> dict:
    return {
        "prior": c.prior_level.value,
        "n": c.n_examinees,
        "quality": c.quality.value,
        "generator": c.generating_variant.value,
    }


def selection_table(artifacts: Sequence[RunArtifact], config: StudyConfig) -> list[dict]:
    """One row per (condition, estimator) with selection counts per index."""
    rows = []
    for condition in config.conditions:
        runs = [a for a in artifacts if a.condition == condition]
        for variant in config.estimation_variants:
            rows.append(
                {
                    **_condition_cols(condition),
                    "estimator": variant.value,
                    "dic_count": sum(a.selections["DIC"] is variant for a in runs),
                    "waic_count": sum(a.selections["WAIC"] is variant for a in runs),
                    "psisloo_count": sum(a.selections["PSIS-LOO"] is variant for a in runs),
                }
            )
    return rows


def recovery_rows(artifacts: Sequence[RunArtifact]) -> list[dict]:
    """Bias/RMSE per parameter class, per replication and pooled ("all") per condition."""
    rows = []
    by_condition: dict[SimCondition, list[RunArtifact]] = {}
    for a in artifacts:
        if a.recovery:
            by_condition.setdefault(a.condition, []).append(a)
    for condition, runs in by_condition.items():
        groups = [(str(a.replication), [a]) for a in runs] + [("all", runs)]
        for label, group in groups:
            entries = [r for a in group for r in a.recovery]
            report = compute_bias_rmse(
                [e for _, _, e, _ in entries],
                [t for _, _, _, t in entries],
                [c for _, c, _, _ in entries],
            )
            for cls, cell in report.cells.items():
                rows.append(
                    {
                        **_condition_cols(condition),
                        "estimator": condition.generating_variant.value,
                        "replication": label,
                        "parameter_class": cls,
                        "bias": cell.bias,
                        "rmse": cell.rmse,
                        "n_values": cell.n_values,
                    }
                )
    return rows


def classification_rows(artifacts: Sequence[RunArtifact]) -> list[dict]:
    rows = []
    for a in artifacts:
        for variant, f in a.fits.items():
            marg = f.classification["marginal_rates"]
            rows.append(
                {
                    **_condition_cols(a.condition),
                    "estimator": variant.value,
                    "replication": a.replication,
                    "profile_rate": f.classification["profile_rate"],
                    **{f"marginal_{k + 1}": m for k, m in enumerate(marg)},
                    "marginal_mean": float(np.mean(marg)),
                }
            )
    return rows


def json_safe(obj):
    """Non-finite floats become ``null`` so the output is strict JSON."""
    if isinstance(obj, dict):
        return {k: json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _write_csv(path: Path, rows: list[dict], header: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(header), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k, "")) for k in header})


SELECTION_HEADER = ("prior", "n", "quality", "generator", "estimator", "dic_count", "waic_count", "psisloo_count")
INDEX_HEADER = (
    "prior", "n", "quality", "generator", "replication", "seed", "estimator",
    "converged", "max_rhat", "attempts", "index", "value", "penalty", "elpd",
    "selected", "khat_max", "khat_n_bad",
)  # fmt: skip
RECOVERY_HEADER = (
    "prior", "n", "quality", "generator", "estimator", "replication",
    "parameter_class", "bias", "rmse", "n_values",
)  # fmt: skip


def emit_reports(
    artifacts: Sequence[RunArtifact],
    out_dir: str | Path,
    config: StudyConfig | None = None,
    failures: Sequence[str] = (),
) -> list[Path]:
    """Write tables, per-run JSON and the manifest; returns the files written.

    With no artifacts only ``manifest.json`` is written.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc
    written = []
    if artifacts:
        if config is None:
            raise ValueError("config is required to tabulate artifacts")
        written.append(out / "selection_table.csv")
        _write_csv(written[-1], selection_table(artifacts, config), SELECTION_HEADER)

        index_rows = []
        for a in artifacts:
            for variant, f in a.fits.items():
                common = {
                    **_condition_cols(a.condition),
                    "replication": a.replication,
                    "seed": a.seed,
                    "estimator": variant.value,
                    "converged": f.converged,
                    "max_rhat": f.max_rhat,
                    "attempts": f.attempts,
                    "khat_max": f.indices["khat_max"],
                    "khat_n_bad": f.indices["khat_n_bad"],
                }
                for kind, value, penalty, elpd in (
                    ("DIC", f.indices["dic"], f.indices["p_dic"], math.nan),
                    ("WAIC", f.indices["waic"], f.indices["p_waic"], f.indices["elpd_waic"]),
                    ("PSIS-LOO", -2.0 * f.indices["elpd_psis_loo"], f.indices["p_loo"], f.indices["elpd_psis_loo"]),
                ):
                    index_rows.append(
                        {
                            **common,
                            "index": kind,
                            "value": value,
                            "penalty": penalty,
                            "elpd": elpd,
                            "selected": a.selections[kind] is variant,
                        }
                    )
        written.append(out / "indices.csv")
        _write_csv(written[-1], index_rows, INDEX_HEADER)

        written.append(out / "recovery.csv")
        _write_csv(written[-1], recovery_rows(artifacts), RECOVERY_HEADER)

        class_rows = classification_rows(artifacts)
        n_attr = max(len(r) for r in class_rows) - 8 if class_rows else 0
        header = (
            ["prior", "n", "quality", "generator", "estimator", "replication", "profile_rate"]
            + [f"marginal_{k + 1}" for k in range(n_attr)]
            + ["marginal_mean"]
        )
        written.append(out / "classification.csv")
        _write_csv(written[-1], class_rows, header)

        runs_dir = out / "runs"
        runs_dir.mkdir(exist_ok=True)
        for a in artifacts:
            path = runs_dir / f"{a.condition.id}-rep{a.replication:03d}.json"
            path.write_text(json.dumps(json_safe(a.to_json()), indent=2, allow_nan=False) + "\n")
            written.append(path)

    manifest = {
        "config": config.to_json() if config else None,
        "config_hash": config.digest() if config else None,
        "study_seed": config.study_seed if config else None,
        "seeds": {f"{a.condition.id}/{a.replication}": a.seed for a in artifacts},
        "n_artifacts": len(artifacts),
        "nonconverged": [
            f"{a.condition.id}/{a.replication}/{v.value}"
            for a in artifacts
            for v, f in a.fits.items()
            if not f.converged
        ],
        "failures": list(failures),
        "versions": {
            "dcmselect": _package_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    }
    written.append(out / "manifest.json")
    written[-1].write_text(json.dumps(json_safe(manifest), indent=2, sort_keys=True, allow_nan=False) + "\n")
    return written


def _package_version() -> str:
    from dcmselect import __version__

    return __version__


def with_overrides(config: StudyConfig, seed: int | None = None, out: str | None = None) -> StudyConfig:
    changes = {}
    if seed is not None:
        changes["study_seed"] = seed
    if out is not None:
        changes["output_dir"] = out
    return replace(config, **changes) if changes else config
