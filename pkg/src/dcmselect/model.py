"""Attribute profiles, Q-matrices and the LCDM family of item response functions.

Attribute indices are 0-based internally.  Serialized effect keys (JSON,
CSV headers) use 1-based attribute numbers, e.g. ``"2,3"`` for the
interaction of the second and third attribute.
"""

from __future__ import annotations

import csv
import enum
import io
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit, log_expit

MAX_ATTRIBUTES = 16

# keeps log(p) and log(1 - p) finite
PROB_EPS = np.finfo(float).eps

EffectKey = tuple[int, ...]


class ModelVariant(str, enum.Enum):
    LCDM = "LCDM"
    DINA = "DINA"
    CRUM = "CRUM"

    @classmethod
    def parse(cls, value: "str | ModelVariant") -> "ModelVariant":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValueError(f"unknown model variant {value!r}") from None


def enumerate_profiles(n_attributes: int) -> NDArray[np.int_]:
    """All ``2**A`` attribute profiles in binary counting order.

    Row ``c`` has ``alpha[c, a] = (c >> a) & 1``, so the first attribute is
    the least significant bit: row 0 is all zeros, row ``2**A - 1`` all ones.
    """
    if n_attributes < 1 or n_attributes > MAX_ATTRIBUTES:
        raise ValueError(f"attribute count must be in [1, {MAX_ATTRIBUTES}], got {n_attributes}")
    codes = np.arange(2**n_attributes)
    return ((codes[:, None] >> np.arange(n_attributes)[None, :]) & 1).astype(np.int_)


def profile_index(profile: Sequence[int]) -> int:
    """Inverse of :func:`enumerate_profiles` for a single profile."""
    return int(sum(int(bit) << a for a, bit in enumerate(profile)))


def lattice_edges(n_attributes: int) -> tuple[NDArray[np.int_], NDArray[np.int_]]:
    """Pairs ``(lower, upper)`` of profile indices differing by one extra mastered attribute."""
    lower, upper = [], []
    for c in range(2**n_attributes):
        for a in range(n_attributes):
            if not (c >> a) & 1:
                lower.append(c)
                upper.append(c | (1 << a))
    return np.array(lower, dtype=np.int_), np.array(upper, dtype=np.int_)


@dataclass(frozen=True)
class QMatrix:
    """Binary item-by-attribute incidence matrix."""

    entries: NDArray[np.int_]

    def __post_init__(self):
        q = np.array(self.entries, dtype=np.int_, copy=True)
        if q.ndim != 2 or q.shape[0] == 0 or q.shape[1] == 0:
            raise ValueError("Q-matrix must be a non-empty 2-D array")
        if not np.isin(q, (0, 1)).all():
            raise ValueError("Q-matrix entries must be 0 or 1")
        if (q.sum(axis=1) == 0).any():
            bad = np.flatnonzero(q.sum(axis=1) == 0) + 1
            raise ValueError(f"items {bad.tolist()} measure no attribute")
        if (q.sum(axis=0) == 0).any():
            bad = np.flatnonzero(q.sum(axis=0) == 0) + 1
            raise ValueError(f"attributes {bad.tolist()} are measured by no item")
        if q.shape[1] > MAX_ATTRIBUTES:
            raise ValueError(f"at most {MAX_ATTRIBUTES} attributes supported")
        q.setflags(write=False)
        object.__setattr__(self, "entries", q)

    @property
    def n_items(self) -> int:
        return self.entries.shape[0]

    @property
    def n_attributes(self) -> int:
        return self.entries.shape[1]

    def row(self, i: int) -> NDArray[np.int_]:
        return self.entries[i]

    def __len__(self) -> int:
        return self.n_items

    def __eq__(self, other) -> bool:
        return isinstance(other, QMatrix) and np.array_equal(self.entries, other.entries)

    def __hash__(self) -> int:
        return hash(self.entries.tobytes())

    @classmethod
    def from_csv(cls, path: str | Path) -> "QMatrix":
        """Read a 0/1 CSV, one row per item; a non-numeric first row is a header."""
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
        if rows and not _is_numeric_row(rows[0]):
            rows = rows[1:]
        return cls(np.array([[int(float(c)) for c in r] for r in rows], dtype=np.int_))

    def to_csv(self, path: str | Path | None = None, header: bool = True) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        if header:
            writer.writerow([f"A{a + 1}" for a in range(self.n_attributes)])
        writer.writerows(self.entries.tolist())
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def _is_numeric_row(row: Sequence[str]) -> bool:
    try:
        [float(c) for c in row]
    except ValueError:
        return False
    return True


def _measured(q_row: Sequence[int]) -> list[int]:
    q = np.asarray(q_row)
    if q.ndim != 1 or not np.isin(q, (0, 1)).all():
        raise ValueError("q-row must be a binary vector")
    measured = np.flatnonzero(q).tolist()
    if not measured:
        raise ValueError("q-row measures no attribute")
    return measured


def active_effects(q_row: Sequence[int], variant: ModelVariant | str) -> list[EffectKey]:
    """Effect keys retained by ``variant`` for an item with Q-matrix row ``q_row``.

    Keys are sorted by (cardinality, lexicographic).  LCDM keeps every
    nonempty subset of the measured attributes, DINA only the full set and
    CRUM only the singletons; a single-attribute item yields one singleton
    under every variant.
    """
    variant = ModelVariant.parse(variant)
    measured = _measured(q_row)
    if variant is ModelVariant.DINA:
        return [tuple(measured)]
    if variant is ModelVariant.CRUM:
        return [(a,) for a in measured]
    return [
        key
        for size in range(1, len(measured) + 1)
        for key in itertools.combinations(measured, size)
    ]


def build_design_vector(
    profile: Sequence[int], q_row: Sequence[int], variant: ModelVariant | str
) -> NDArray[np.int_]:
    """Indicator ``prod_{a in K} alpha_a`` for each active effect key ``K``."""
    alpha = np.asarray(profile, dtype=np.int_)
    if alpha.shape != np.asarray(q_row).shape:
        raise ValueError("profile and q-row lengths differ")
    if not np.isin(alpha, (0, 1)).all():
        raise ValueError("profile entries must be 0 or 1")
    keys = active_effects(q_row, variant)
    return np.array([int(alpha[list(k)].all()) for k in keys], dtype=np.int_)


def format_key(key: EffectKey) -> str:
    return ",".join(str(a + 1) for a in key)


def parse_key(text: str) -> EffectKey:
    key = tuple(sorted(int(t) - 1 for t in text.split(",")))
    if not key or min(key) < 0:
        raise ValueError(f"bad effect key {text!r}")
    return key


def _key_order(key: EffectKey):
    return (len(key), key)


@dataclass(frozen=True)
class ItemParameters:
    """Intercept and effect coefficients (logit scale) of one item."""

    intercept: float
    effects: dict[EffectKey, float] = field(default_factory=dict)

    def __post_init__(self):
        ordered = {tuple(k): float(self.effects[k]) for k in sorted(self.effects, key=_key_order)}
        object.__setattr__(self, "intercept", float(self.intercept))
        object.__setattr__(self, "effects", ordered)

    def coefficients(self, keys: Iterable[EffectKey]) -> NDArray[np.float64]:
        return np.array([self.effects.get(tuple(k), 0.0) for k in keys], dtype=float)

    def to_json(self) -> dict:
        return {
            "intercept": self.intercept,
            "effects": {format_key(k): v for k, v in self.effects.items()},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ItemParameters":
        return cls(
            intercept=obj["intercept"],
            effects={parse_key(k): v for k, v in obj.get("effects", {}).items()},
        )


def dump_item_params(params: Sequence[ItemParameters]) -> str:
    return json.dumps([p.to_json() for p in params], indent=2)


def load_item_params(text: str) -> list[ItemParameters]:
    return [ItemParameters.from_json(obj) for obj in json.loads(text)]


def _check_effects(item: ItemParameters, q_row, variant) -> list[EffectKey]:
    keys = active_effects(q_row, variant)
    extra = set(item.effects) - set(keys)
    if extra:
        raise ValueError(
            f"effects {sorted(format_key(k) for k in extra)} not active for {ModelVariant.parse(variant).value}"
        )
    return keys


def linear_predictor(
    profile: Sequence[int], item: ItemParameters, q_row: Sequence[int], variant: ModelVariant | str
) -> float:
    keys = _check_effects(item, q_row, variant)
    coef = item.coefficients(keys)
    if not (math.isfinite(item.intercept) and np.isfinite(coef).all()):
        raise ValueError("item parameters must be finite")
    h = build_design_vector(profile, q_row, variant)
    return item.intercept + float(h @ coef)


def clamp_probability(p):
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


_LOG_EPS = math.log(PROB_EPS)


def log_prob_pair(logits):
    """``(log p, log(1 - p))`` for correct-response logits, floored at ``log(eps)``."""
    log_p = log_expit(logits)
    return np.maximum(log_p, _LOG_EPS), np.maximum(log_p - logits, _LOG_EPS)


def response_probability(
    profile: Sequence[int], item: ItemParameters, q_row: Sequence[int], variant: ModelVariant | str
) -> float:
    """Probability of a correct response, ``logistic(intercept + effects . h(alpha, q))``."""
    return float(clamp_probability(expit(linear_predictor(profile, item, q_row, variant))))


def is_monotone(item: ItemParameters, q_row: Sequence[int], variant: ModelVariant | str) -> bool:
    """True when mastering any extra measured attribute never lowers the logit."""
    n_attributes = len(q_row)
    eta = np.array(
        [linear_predictor(p, item, q_row, variant) for p in enumerate_profiles(n_attributes)]
    )
    lower, upper = lattice_edges(n_attributes)
    return bool((eta[upper] >= eta[lower]).all())


class ModelStructure:
    """Vectorized design of a whole test under one model variant.

    Coefficients of item ``i`` live in row ``i`` of an ``(I, P)`` array:
    slot 0 is the intercept, slots ``1..K_i`` the active effects in canonical
    order, remaining slots are padding (masked out and held at zero).
    """

    def __init__(self, qmatrix: QMatrix, variant: ModelVariant | str):
        self.qmatrix = qmatrix
        self.variant = ModelVariant.parse(variant)
        self.lattice = enumerate_profiles(qmatrix.n_attributes)
        self.keys: list[list[EffectKey]] = [
            active_effects(qmatrix.row(i), self.variant) for i in range(qmatrix.n_items)
        ]
        n_items, n_classes = qmatrix.n_items, self.lattice.shape[0]
        self.n_slots = 1 + max(len(k) for k in self.keys)
        self.design = np.zeros((n_items, n_classes, self.n_slots))
        self.mask = np.zeros((n_items, self.n_slots), dtype=bool)
        # 0 = intercept, otherwise the interaction order of the effect
        self.order = np.zeros((n_items, self.n_slots), dtype=np.int_)
        self.design[:, :, 0] = 1.0
        self.mask[:, 0] = True
        for i, keys in enumerate(self.keys):
            for j, key in enumerate(keys, start=1):
                self.design[i, :, j] = self.lattice[:, list(key)].all(axis=1)
                self.mask[i, j] = True
                self.order[i, j] = len(key)
        self._lower, self._upper = lattice_edges(qmatrix.n_attributes)

    @property
    def n_items(self) -> int:
        return self.qmatrix.n_items

    @property
    def n_classes(self) -> int:
        return self.lattice.shape[0]

    @property
    def n_params(self) -> int:
        return int(self.mask.sum())

    def logits(self, coef: NDArray) -> NDArray:
        """``(..., I, P)`` coefficients -> ``(..., I, C)`` linear predictors."""
        return np.einsum("icp,...ip->...ic", self.design, coef)

    def probabilities(self, coef: NDArray) -> NDArray:
        return clamp_probability(expit(self.logits(coef)))

    def monotone(self, logits: NDArray) -> NDArray[np.bool_]:
        """Per-item flag: logits never decrease along any lattice edge."""
        return (logits[..., self._upper] >= logits[..., self._lower]).all(axis=-1)

    def to_array(self, params: Sequence[ItemParameters]) -> NDArray[np.float64]:
        if len(params) != self.n_items:
            raise ValueError(f"expected {self.n_items} items, got {len(params)}")
        coef = np.zeros((self.n_items, self.n_slots))
        for i, (item, keys) in enumerate(zip(params, self.keys)):
            extra = set(item.effects) - set(keys)
            if extra:
                raise ValueError(f"item {i + 1}: effects not active under {self.variant.value}")
            coef[i, 0] = item.intercept
            coef[i, 1 : len(keys) + 1] = item.coefficients(keys)
        return coef

    def from_array(self, coef: NDArray) -> list[ItemParameters]:
        return [
            ItemParameters(
                intercept=float(coef[i, 0]),
                effects={k: float(coef[i, j]) for j, k in enumerate(keys, start=1)},
            )
            for i, keys in enumerate(self.keys)
        ]

    def parameter_names(self) -> list[str]:
        names = []
        for i, keys in enumerate(self.keys):
            names.append(f"item{i + 1}.intercept")
            names.extend(f"item{i + 1}.effect[{format_key(k)}]" for k in keys)
        return names
