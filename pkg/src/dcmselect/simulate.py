"""Study design and seeded data generation."""

from __future__ import annotations

import csv
import enum
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.special import logit

from dcmselect.model import (
    ItemParameters,
    ModelStructure,
    ModelVariant,
    QMatrix,
    dump_item_params,
    enumerate_profiles,
    load_item_params,
    profile_index,
)

# Base-rate table for three correlated attributes, keyed by profile content
# (attribute 1, attribute 2, attribute 3).  The published column sums to 1.001.
STUDY_PROFILE_TABLE: dict[tuple[int, int, int], float] = {
    (0, 0, 0): 0.293,
    (0, 0, 1): 0.075,
    (0, 1, 0): 0.075,
    (0, 1, 1): 0.054,
    (1, 0, 0): 0.075,
    (1, 0, 1): 0.054,
    (1, 1, 0): 0.054,
    (1, 1, 1): 0.321,
}

STUDY_BASE_RATE = 0.504


class Quality(str, enum.Enum):
    MEDIUM = "medium"
    HIGH = "high"

    @classmethod
    def parse(cls, value: "str | Quality") -> "Quality":
        if isinstance(value, cls):
            return value
        return cls(str(value).lower())


class PriorLevel(str, enum.Enum):
    INFORMATIVE = "informative"
    UNINFORMATIVE = "uninformative"

    @classmethod
    def parse(cls, value: "str | PriorLevel") -> "PriorLevel":
        if isinstance(value, cls):
            return value
        return cls(str(value).lower())


@dataclass(frozen=True)
class ItemQualitySpec:
    """Generating coefficients for one item-quality level.

    ``target_probs[k]`` is the intended correct-response probability for an
    examinee mastering ``k`` of the measured attributes.
    """

    quality: Quality
    intercept: float
    main: float
    two_way: float
    three_way: float
    target_probs: tuple[float, float, float, float]

    def __post_init__(self):
        if not all(a < b for a, b in zip(self.target_probs, self.target_probs[1:])):
            raise ValueError("target probabilities must be strictly increasing")

    def interaction(self, order: int) -> float:
        return {2: self.two_way, 3: self.three_way}.get(order, 0.0)


MEDIUM = ItemQualitySpec(Quality.MEDIUM, -1.10, 1.30, 0.23, 3.40, (0.25, 0.55, 0.85, 0.99))
HIGH = ItemQualitySpec(Quality.HIGH, -2.0, 2.0, 1.0, 0.1, (0.12, 0.50, 0.95, 0.99))
QUALITY_SPECS = {Quality.MEDIUM: MEDIUM, Quality.HIGH: HIGH}


@dataclass(frozen=True)
class PopulationSpec:
    """Mixing weights over the ``2**A`` profiles in lattice order."""

    proportions: tuple[float, ...]

    def __post_init__(self):
        p = np.asarray(self.proportions, dtype=float)
        if p.ndim != 1 or (p < 0).any() or p.sum() <= 0:
            raise ValueError("proportions must be non-negative with positive sum")
        n_attributes = int(np.log2(p.size))
        if 2**n_attributes != p.size:
            raise ValueError("need one proportion per profile (a power of two)")
        object.__setattr__(self, "proportions", tuple((p / p.sum()).tolist()))

    @property
    def n_attributes(self) -> int:
        return int(np.log2(len(self.proportions)))

    @property
    def weights(self) -> NDArray[np.float64]:
        return np.array(self.proportions)

    @classmethod
    def study_default(cls) -> "PopulationSpec":
        lattice = enumerate_profiles(3)
        return cls(tuple(STUDY_PROFILE_TABLE[tuple(int(b) for b in row)] for row in lattice))

    @classmethod
    def point_mass(cls, profile: Sequence[int]) -> "PopulationSpec":
        p = np.zeros(2 ** len(profile))
        p[profile_index(profile)] = 1.0
        return cls(tuple(p.tolist()))


@dataclass(frozen=True)
class SimCondition:
    generating_variant: ModelVariant
    n_examinees: int
    quality: Quality
    prior_level: PriorLevel

    def __post_init__(self):
        object.__setattr__(self, "generating_variant", ModelVariant.parse(self.generating_variant))
        object.__setattr__(self, "quality", Quality.parse(self.quality))
        object.__setattr__(self, "prior_level", PriorLevel.parse(self.prior_level))
        if int(self.n_examinees) < 1:
            raise ValueError("n_examinees must be >= 1")
        object.__setattr__(self, "n_examinees", int(self.n_examinees))

    @property
    def id(self) -> str:
        return (
            f"{self.prior_level.value}-n{self.n_examinees}-"
            f"{self.quality.value}-{self.generating_variant.value.lower()}"
        )

    def to_json(self) -> dict:
        return {
            "generator": self.generating_variant.value,
            "n": self.n_examinees,
            "quality": self.quality.value,
            "prior": self.prior_level.value,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SimCondition":
        return cls(obj["generator"], obj["n"], obj["quality"], obj["prior"])


def derive_seed(study_seed: int, *parts: object) -> int:
    """Replication seed = hash(study_seed, condition id, replication id, ...)."""
    text = "/".join([str(int(study_seed))] + [str(p) for p in parts])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def build_study_qmatrix() -> QMatrix:
    """28 items: four consecutive items for each nonzero pattern of three attributes."""
    patterns = [
        (1, 0, 0),
        (0, 1, 0),
        (0, 0, 1),
        (1, 1, 0),
        (1, 0, 1),
        (0, 1, 1),
        (1, 1, 1),
    ]
    return QMatrix(np.array([p for p in patterns for _ in range(4)], dtype=np.int_))


def build_true_item_params(
    qmatrix: QMatrix,
    quality: ItemQualitySpec | Quality | str,
    variant: ModelVariant | str,
    dina_interaction: str = "recalibrate",
    crum_mains: str = "verbatim",
) -> list[ItemParameters]:
    """Generating parameters for every item.

    LCDM items take the quality table verbatim.  CRUM keeps the intercept and
    main effects (``crum_mains="recalibrate"`` instead spreads
    ``logit(p_full) - intercept`` evenly over the mains).  DINA keeps the
    intercept and, with ``dina_interaction="recalibrate"``, sets the single
    interaction so that full mastery reaches the target probability;
    ``"verbatim"`` uses the table's interaction of matching order.
    Single-attribute items get the table's main effect under every variant.
    """
    if not isinstance(quality, ItemQualitySpec):
        quality = QUALITY_SPECS[Quality.parse(quality)]
    if dina_interaction not in ("recalibrate", "verbatim"):
        raise ValueError(f"dina_interaction must be 'recalibrate' or 'verbatim', got {dina_interaction!r}")
    if crum_mains not in ("recalibrate", "verbatim"):
        raise ValueError(f"crum_mains must be 'recalibrate' or 'verbatim', got {crum_mains!r}")
    structure = ModelStructure(qmatrix, variant)
    params = []
    for keys in structure.keys:
        n_measured = len(keys[-1]) if structure.variant is not ModelVariant.CRUM else len(keys)
        p_full = quality.target_probs[min(n_measured, 3)]
        effects = {}
        for key in keys:
            if len(key) == 1:
                if structure.variant is ModelVariant.CRUM and crum_mains == "recalibrate" and n_measured > 1:
                    effects[key] = (logit(p_full) - quality.intercept) / n_measured
                else:
                    effects[key] = quality.main
            elif structure.variant is ModelVariant.DINA and dina_interaction == "recalibrate":
                effects[key] = float(logit(p_full) - quality.intercept)
            else:
                effects[key] = quality.interaction(len(key))
        params.append(ItemParameters(quality.intercept, effects))
    return params


def sample_profiles(
    n: int, population: PopulationSpec, seed: int | np.random.Generator | None = None
) -> NDArray[np.int_]:
    """``n`` i.i.d. profiles, returned as an ``(n, A)`` 0/1 array."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    classes = rng.choice(len(population.proportions), size=n, p=population.weights)
    return enumerate_profiles(population.n_attributes)[classes]


@dataclass
class ResponseMatrix:
    """Binary responses (examinees x items), optionally with generating truth."""

    data: NDArray[np.int_]
    profiles: NDArray[np.int_] | None = None
    params: list[ItemParameters] | None = None
    qmatrix: QMatrix | None = None
    variant: ModelVariant | None = None
    condition: SimCondition | None = None
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.int_)
        if self.data.ndim != 2 or not np.isin(self.data, (0, 1)).all():
            raise ValueError("responses must be a 2-D 0/1 matrix")

    @property
    def n_examinees(self) -> int:
        return self.data.shape[0]

    @property
    def n_items(self) -> int:
        return self.data.shape[1]

    def save(self, stem: str | Path) -> tuple[Path, Path]:
        """Write ``<stem>.csv`` and the ``<stem>.truth.json`` sidecar."""
        stem = Path(stem)
        csv_path = stem.with_suffix(".csv")
        save_responses_csv(self.data, csv_path)
        truth = {
            "condition": self.condition.to_json() if self.condition else None,
            "seed": self.seed,
            "variant": self.variant.value if self.variant else None,
            "qmatrix": self.qmatrix.entries.tolist() if self.qmatrix is not None else None,
            "profiles": self.profiles.tolist() if self.profiles is not None else None,
            "params": json.loads(dump_item_params(self.params)) if self.params else None,
            **self.extra,
        }
        json_path = stem.with_suffix(".truth.json")
        json_path.write_text(json.dumps(truth, indent=2) + "\n")
        return csv_path, json_path

    @classmethod
    def load(cls, stem: str | Path) -> "ResponseMatrix":
        stem = Path(stem)
        data = load_responses_csv(stem.with_suffix(".csv"))
        truth_path = stem.with_suffix(".truth.json")
        if not truth_path.exists():
            return cls(data)
        truth = json.loads(truth_path.read_text())
        return cls(
            data,
            profiles=np.array(truth["profiles"]) if truth.get("profiles") is not None else None,
            params=load_item_params(json.dumps(truth["params"])) if truth.get("params") else None,
            qmatrix=QMatrix(np.array(truth["qmatrix"])) if truth.get("qmatrix") else None,
            variant=ModelVariant.parse(truth["variant"]) if truth.get("variant") else None,
            condition=SimCondition.from_json(truth["condition"]) if truth.get("condition") else None,
            seed=truth.get("seed"),
        )


def save_responses_csv(data: NDArray, path: str | Path) -> None:
    data = np.asarray(data, dtype=np.int_)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"item{i + 1}" for i in range(data.shape[1])])
        writer.writerows(data.tolist())


def load_responses_csv(path: str | Path) -> NDArray[np.int_]:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    try:
        [float(c) for c in rows[0]]
    except ValueError:
        rows = rows[1:]
    return np.array([[int(float(c)) for c in r] for r in rows], dtype=np.int_)


def generate_responses(
    profiles: NDArray[np.int_],
    qmatrix: QMatrix,
    params: Sequence[ItemParameters],
    variant: ModelVariant | str,
    seed: int | np.random.Generator | None = None,
) -> ResponseMatrix:
    """Independent Bernoulli responses given each examinee's profile."""
    profiles = np.atleast_2d(np.asarray(profiles, dtype=np.int_))
    if profiles.shape[1] != qmatrix.n_attributes:
        raise ValueError("profile length does not match the Q-matrix")
    structure = ModelStructure(qmatrix, variant)
    prob = structure.probabilities(structure.to_array(params))  # (I, C)
    classes = profiles @ (1 << np.arange(qmatrix.n_attributes))
    rng = np.random.default_rng(seed)
    u = rng.random((profiles.shape[0], qmatrix.n_items))
    data = (u < prob[:, classes].T).astype(np.int_)
    return ResponseMatrix(
        data,
        profiles=profiles,
        params=list(params),
        qmatrix=qmatrix,
        variant=structure.variant,
        seed=seed if isinstance(seed, int) else None,
    )


def generate_condition(
    condition: SimCondition,
    seed: int,
    qmatrix: QMatrix | None = None,
    population: PopulationSpec | None = None,
    dina_interaction: str = "recalibrate",
    crum_mains: str = "verbatim",
) -> ResponseMatrix:
    """Full dataset for one simulation cell; bit-identical for a given seed."""
    qmatrix = qmatrix if qmatrix is not None else build_study_qmatrix()
    population = population if population is not None else PopulationSpec.study_default()
    params = build_true_item_params(
        qmatrix,
        condition.quality,
        condition.generating_variant,
        dina_interaction=dina_interaction,
        crum_mains=crum_mains,
    )
    profile_seed, response_seed = np.random.SeedSequence(seed).spawn(2)
    profiles = sample_profiles(condition.n_examinees, population, np.random.default_rng(profile_seed))
    out = generate_responses(
        profiles, qmatrix, params, condition.generating_variant, np.random.default_rng(response_seed)
    )
    out.condition = condition
    out.seed = seed
    return out
