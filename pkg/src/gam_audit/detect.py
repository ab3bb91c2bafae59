"""Two-step detection of defining features.

Step 1 fits a GAM for every non-empty subset of the candidate features and
ranks them by held-out explained deviance, breaking near-ties by training edf.
If the best subset explains at least ``delta`` of the deviance it becomes the
defining set. Step 2 refits on all candidates and checks that every other
candidate's shape collapses to (near) zero while the defining shapes do not.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from itertools import combinations
from typing import Sequence

import numpy as np

from .dataset import MAX_CANDIDATES, CandidateSet, Dataset, apply_scaling, pearson, pearson_rank, split_by_group, standardize
from .errors import ConfigError, DetectionError, GamAuditError, SingularFitError
from .gam import DEFAULT_BASIS, LAMBDA_GRID, FittedGam, GamProblem, deviance, optimize_lambdas, shape
from .spline import MAX_BASIS, MIN_BASIS

log = logging.getLogger(__name__)

FOUND = "defining-set-found"
NONE = "none"
CONFIRMED = "confirmed"
REFUTED = "refuted"


@dataclass(frozen=True)
class DetectionConfig:
    delta: float = 0.95
    epsilon: float = 0.005
    tau: float = 0.05
    max_candidates: int = 5
    n_basis: int = DEFAULT_BASIS
    test_fraction: float = 0.2
    seed: int = 1
    workers: int = 1
    grid_size: int = 200

    def __post_init__(self):
        if not 0 < self.delta <= 1:
            raise ConfigError("delta must lie in (0, 1]")
        if not self.delta > self.epsilon >= 0:
            raise ConfigError("need delta > epsilon >= 0")
        if not 0 < self.tau < 1:
            raise ConfigError("tau must lie in (0, 1)")
        if not 1 <= self.max_candidates <= MAX_CANDIDATES:
            raise ConfigError(f"max_candidates must lie in [1, {MAX_CANDIDATES}]")
        if not MIN_BASIS <= self.n_basis <= MAX_BASIS:
            raise ConfigError(f"n_basis must lie in [{MIN_BASIS}, {MAX_BASIS}]")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, payload):
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown detection config keys: {sorted(unknown)}")
        return cls(**payload)


@dataclass(frozen=True)
class RankedModel:
    features: tuple[str, ...]
    d2: float | None
    edf: float | None
    rank: int = 0
    lambdas: dict[str, float] = field(default_factory=dict)
    status: str = "ok"
    message: str = ""

    @property
    def name(self) -> str:
        return " + ".join(self.features)

    @property
    def sort_name(self) -> tuple[str, ...]:
        return tuple(sorted(self.features))

    def to_dict(self):
        return {
            "rank": self.rank,
            "features": list(self.features),
            "d2": self.d2,
            "edf": self.edf,
            "lambdas": self.lambdas,
            "status": self.status,
            "message": self.message,
        }


def rank_models(models: Sequence[RankedModel], epsilon: float) -> list[RankedModel]:
    """Total order: D2 descending; models within ``epsilon`` of the current
    leader are ordered by edf ascending, then by sorted feature names."""
    ok = sorted(
        (m for m in models if m.status == "ok" and m.d2 is not None),
        key=lambda m: (-m.d2, m.edf, m.sort_name),
    )
    rest = sorted((m for m in models if m not in ok), key=lambda m: m.sort_name)
    ordered = []
    pending = ok
    while pending:
        cutoff = pending[0].d2 - epsilon
        group = [m for m in pending if m.d2 >= cutoff]
        ordered.extend(sorted(group, key=lambda m: (m.edf, m.sort_name)))
        pending = [m for m in pending if m.d2 < cutoff]
    ordered.extend(rest)
    return [RankedModel(m.features, m.d2, m.edf, i + 1, m.lambdas, m.status, m.message) for i, m in enumerate(ordered)]


def _pool_map(fn, items, workers):
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def step1_search(
    train: Dataset, eval: Dataset, cand: CandidateSet, cfg: DetectionConfig = DetectionConfig()
) -> tuple[list[RankedModel], tuple[str, ...] | None]:
    """Fit every non-empty candidate subset; return the ranking and the defining set (or None)."""
    names = list(cand.names)
    if not names:
        raise DetectionError("candidate set is empty")
    if len(names) > cfg.max_candidates:
        raise ConfigError(f"{len(names)} candidates exceed max_candidates={cfg.max_candidates}")
    problem = GamProblem.from_dataset(train, names, cfg.n_basis)
    subsets = [c for r in range(1, len(names) + 1) for c in combinations(names, r)]

    def run(subset):
        try:
            g = optimize_lambdas(train, subset, cfg.n_basis, problem=problem)
        except SingularFitError as exc:
            log.warning("fit failed for %s: %s", subset, exc)
            return RankedModel(subset, None, None, status="failed", message=str(exc))
        metrics = deviance(g, eval)
        if metrics.d2 is None:
            return RankedModel(subset, None, g.edf_total, lambdas=g.lambdas, status="degenerate",
                               message="evaluation labels have zero variance")
        return RankedModel(subset, metrics.d2, g.edf_total, lambdas=g.lambdas)

    ranked = rank_models(_pool_map(run, subsets, cfg.workers), cfg.epsilon)
    top = ranked[0]
    if top.status == "ok" and top.d2 >= cfg.delta:
        return ranked, top.features
    return ranked, None


def nullification_score(g: FittedGam, feature: str) -> float | None:
    """Spread of one feature's contribution relative to the spread of the fit.

    Both standard deviations are taken over the training rows. ``None`` marks
    a constant fit, where the ratio is undefined.
    """
    g.term(feature)
    if g.fitted_sd == 0:
        return None
    return g.term_sd[feature] / g.fitted_sd


@dataclass(frozen=True, eq=False)
class Step2Result:
    scores: dict[str, float | None]
    verdict: str
    extended: FittedGam
    extended_d2: float | None
    reduced: FittedGam | None
    reduced_d2: float | None


def step2_nullify(
    train: Dataset,
    eval: Dataset,
    c_star: Sequence[str],
    cand: CandidateSet,
    cfg: DetectionConfig = DetectionConfig(),
) -> Step2Result:
    """Refit on all candidates and test nullification of the non-defining ones.

    Smoothing parameters are re-optimized for the extended model. The model on
    the candidates outside ``c_star`` is fitted as well, for side-by-side shapes.
    """
    c_star = list(c_star)
    if not c_star:
        raise DetectionError("step 2 needs a non-empty defining set")
    others = [n for n in cand.names if n not in c_star]
    features = c_star + others
    problem = GamProblem.from_dataset(train, features, cfg.n_basis)
    extended = optimize_lambdas(train, features, cfg.n_basis, problem=problem)
    scores = {name: nullification_score(extended, name) for name in features}
    confirmed = all(scores[n] is not None and scores[n] < cfg.tau for n in others) and all(
        scores[n] is not None and scores[n] >= cfg.tau for n in c_star
    )
    reduced = reduced_d2 = None
    if others:
        reduced = optimize_lambdas(train, others, cfg.n_basis, problem=problem)
        reduced_d2 = deviance(reduced, eval).d2
    return Step2Result(
        scores=scores,
        verdict=CONFIRMED if confirmed else REFUTED,
        extended=extended,
        extended_d2=deviance(extended, eval).d2,
        reduced=reduced,
        reduced_d2=reduced_d2,
    )


@dataclass(frozen=True, eq=False)
class DetectionReport:
    label: str
    n_train: int
    n_eval: int
    candidates: CandidateSet
    ranked: list[RankedModel]
    defining: tuple[str, ...] | None
    config: DetectionConfig
    step2: Step2Result | None = None
    shapes: dict[str, list] = field(default_factory=dict)
    notes: dict[str, str] = field(default_factory=dict)

    @property
    def step1_verdict(self) -> str:
        return FOUND if self.defining else NONE

    @property
    def step2_verdict(self) -> str | None:
        return self.step2.verdict if self.step2 else None

    @property
    def confirmed(self) -> bool:
        return self.step2_verdict == CONFIRMED

    def model(self, features) -> RankedModel:
        key = tuple(sorted(features))
        for m in self.ranked:
            if m.sort_name == key:
                return m
        raise KeyError(features)

    def best_without(self, excluded) -> RankedModel | None:
        """Highest-ranked successful subset that avoids every feature in ``excluded``."""
        excluded = set(excluded)
        for m in self.ranked:
            if m.status == "ok" and not excluded & set(m.features):
                return m
        return None

    def to_dict(self):
        out = {
            "label": self.label,
            "n_train": self.n_train,
            "n_eval": self.n_eval,
            "candidates": self.candidates.to_dict(),
            "step1": {
                "verdict": self.step1_verdict,
                "defining": list(self.defining) if self.defining else None,
                "ranked": [m.to_dict() for m in self.ranked],
            },
            "config": {k: v for k, v in self.config.to_dict().items() if k != "workers"},
            "notes": self.notes,
        }
        if self.step2 is not None:
            s = self.step2
            out["step2"] = {
                "verdict": s.verdict,
                "scores": s.scores,
                "extended_features": s.extended.features,
                "extended_d2": s.extended_d2,
                "extended_edf": s.extended.edf_total,
                "without_defining_features": s.reduced.features if s.reduced else [],
                "without_defining_d2": s.reduced_d2,
                "shapes": {k: [sh.to_dict() for sh in v] for k, v in self.shapes.items()},
            }
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, allow_nan=False) + "\n"

    def to_text(self) -> str:
        lines = [f"Detection of defining features for {self.label!r}", ""]
        lines.append(f"candidates (|r| with target): " + ", ".join(
            f"{n} ({r:+.3f})" for n, r in zip(self.candidates.names, self.candidates.correlations)))
        lines.append(f"train rows: {self.n_train}   evaluation rows: {self.n_eval}")
        lines.append("")
        lines.append("Step 1: GAMs ranked by data fit (desc) and complexity (asc)")
        width = max(len("features"), *(len(m.name) for m in self.ranked))
        lines.append(f"{'rank':>4}  {'features':<{width}}  {'D2':>8}  {'edf':>7}")
        for m in self.ranked:
            d2 = f"{100 * m.d2:7.2f}%" if m.d2 is not None else f"{m.status:>8}"
            e = f"{m.edf:7.2f}" if m.edf is not None else f"{'-':>7}"
            lines.append(f"{m.rank:>4}  {m.name:<{width}}  {d2}  {e}")
        lines.append("")
        if self.defining:
            lines.append(f"defining set: {{{', '.join(self.defining)}}} "
                         f"(D2 >= delta = {self.config.delta})")
        else:
            best = self.ranked[0].d2 if self.ranked and self.ranked[0].d2 is not None else float("nan")
            lines.append(f"no defining set: best D2 = {best:.4f} < delta = {self.config.delta}")
        if self.step2 is not None:
            s = self.step2
            lines.append("")
            lines.append(f"Step 2: nullification in the extended model (tau = {self.config.tau})")
            for name, score in s.scores.items():
                role = "defining" if name in self.defining else "other"
                val = f"{score:.4f}" if score is not None else "undefined"
                lines.append(f"  {name:<{width}}  {role:<8}  {val}")
            lines.append(f"extended model D2 = {_pct(s.extended_d2)}; "
                         f"without defining features D2 = {_pct(s.reduced_d2)}")
            lines.append(f"verdict: {s.verdict}")
        return "\n".join(lines) + "\n"


def _pct(v):
    return "n/a" if v is None else f"{100 * v:.2f}%"


def candidate_set(d: Dataset, names: Sequence[str]) -> CandidateSet:
    """Wrap user-chosen candidates, recording their correlation with the label."""
    names = list(dict.fromkeys(names))
    for n in names:
        d.column(n)
    return CandidateSet(tuple(names), tuple(pearson(d.column(n), d.label) for n in names))


def detect(
    train: Dataset,
    eval: Dataset,
    cfg: DetectionConfig = DetectionConfig(),
    candidates: Sequence[str] | None = None,
) -> DetectionReport:
    """Full pipeline on an existing train/evaluation partition.

    The labels carried by the datasets are the target, so gold labels and
    black-box predictions go through the same path.
    """
    try:
        train_s, scaling = standardize(train)
        eval_s = apply_scaling(eval, scaling)
        if candidates is None:
            cand = pearson_rank(train_s, train_s.label, cfg.max_candidates)
        else:
            cand = candidate_set(train_s, candidates)
            if len(cand) > cfg.max_candidates:
                raise ConfigError(f"{len(cand)} candidates exceed max_candidates={cfg.max_candidates}")
        ranked, c_star = step1_search(train_s, eval_s, cand, cfg)
        step2 = None
        shapes = {}
        if c_star:
            step2 = step2_nullify(train_s, eval_s, c_star, cand, cfg)
            shapes["extended"] = [shape(step2.extended, n, cfg.grid_size) for n in step2.extended.features]
            if step2.reduced is not None:
                shapes["without_defining"] = [shape(step2.reduced, n, cfg.grid_size) for n in step2.reduced.features]
    except GamAuditError:
        raise
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise DetectionError(f"detection failed: {exc}") from exc
    notes = {
        "family": "gaussian, identity link",
        "basis": f"cubic B-spline, k={cfg.n_basis}, second-order difference penalty over Greville spacing, sum-to-zero centering",
        "knots": "interior knots at evenly spaced quantiles of distinct training values",
        "smoothing": "GCV, cyclic coordinate descent over lambda in 1e-6..1e6 (13 points), 2 sweeps",
        "d2_data": "held-out evaluation partition (split by group)",
        "edf_data": "training partition",
        "step2_smoothing": "re-optimized for the extended model",
        "nullification_score": "sd of feature contribution / sd of fitted values, training rows",
    }
    return DetectionReport(
        label=train.label_name,
        n_train=train.n_rows,
        n_eval=eval.n_rows,
        candidates=cand,
        ranked=ranked,
        defining=c_star,
        config=cfg,
        step2=step2,
        shapes=shapes,
        notes=notes,
    )


def detect_dataset(
    d: Dataset, cfg: DetectionConfig = DetectionConfig(), candidates: Sequence[str] | None = None
) -> DetectionReport:
    """Split ``d`` by group with the configured fraction and seed, then run :func:`detect`."""
    train, eval = split_by_group(d, cfg.test_fraction, cfg.seed)
    return detect(train, eval, cfg, candidates)
