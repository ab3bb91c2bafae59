"""Synthetic ICU-style data labeled by consensus-definition rules.

Features are driven by a small set of latent factors. A *normal* latent is
a standard-normal variable with a patient-level share of variance ``icc``.
A *staged* latent discretizes a normal liability into ordered stages and
places values around per-stage centers, which produces measurements that
cluster inside clinical score bands. A *bernoulli* latent thresholds a
liability at the requested prevalence. Labels are computed from the emitted
feature columns by a :data:`Rule`, so they are an exact function of the data.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from statistics import NormalDist
from typing import Mapping, Union

import numpy as np

from .dataset import BINARY, CONTINUOUS, Dataset
from .errors import ConfigError, GenerationError, RuleError

_NORMAL = NormalDist()


@dataclass(frozen=True)
class ThresholdTable:
    """Score lookup over half-open intervals ``[cut_i, cut_{i+1})``.

    ``cuts`` are always ascending; ``direction`` states whether scores rise
    (ascending) or fall (descending) with the measurement.
    """

    cuts: tuple[float, ...]
    scores: tuple[int, ...]
    direction: str = "ascending"

    def __post_init__(self):
        cuts = np.asarray(self.cuts, dtype=float)
        if len(cuts) and np.any(np.diff(cuts) <= 0):
            raise ConfigError("threshold cuts must be strictly ascending")
        if len(self.scores) != len(self.cuts) + 1:
            raise ConfigError("a threshold table needs exactly one more score than cuts")
        if any(s < 0 or s > 4 for s in self.scores):
            raise ConfigError("scores must lie in [0, 4]")
        steps = np.diff(self.scores)
        if self.direction == "ascending":
            ok = np.all(steps >= 0)
        elif self.direction == "descending":
            ok = np.all(steps <= 0)
        else:
            raise ConfigError(f"unknown direction {self.direction!r}")
        if not ok:
            raise ConfigError(f"scores are not monotone in the {self.direction} direction")

    def to_dict(self):
        return {"cuts": list(self.cuts), "scores": list(self.scores), "direction": self.direction}

    @classmethod
    def from_dict(cls, payload):
        _check_keys(payload, {"cuts", "scores", "direction"}, "threshold table")
        return cls(tuple(float(c) for c in payload["cuts"]), tuple(int(s) for s in payload["scores"]),
                   payload.get("direction", "ascending"))


def eval_step(x, table: ThresholdTable):
    """Score of the interval containing ``x``; a cut value belongs to the upper interval."""
    idx = np.searchsorted(np.asarray(table.cuts, dtype=float), x, side="right")
    scores = np.asarray(table.scores)
    if np.ndim(x) == 0:
        return int(scores[idx])
    return scores[idx]


@dataclass(frozen=True)
class Step:
    feature: str
    table: ThresholdTable


@dataclass(frozen=True)
class Max:
    args: tuple


@dataclass(frozen=True)
class Sum:
    args: tuple


@dataclass(frozen=True)
class Product:
    args: tuple


@dataclass(frozen=True)
class GreaterEq:
    arg: Union[str, "Step", "Max", "Sum", "Product", "GreaterEq"]
    bound: float


Rule = Union[Step, Max, Sum, Product, GreaterEq]


def _lookup(row: Mapping, name: str):
    try:
        return row[name]
    except KeyError:
        raise RuleError(f"rule references missing feature {name!r}") from None


def eval_rule(row: Mapping, rule: Rule):
    """Evaluate ``rule`` on one row (scalars) or on whole columns (arrays)."""
    if isinstance(rule, Step):
        return eval_step(_lookup(row, rule.feature), rule.table)
    if isinstance(rule, Max):
        vals = [eval_rule(row, r) for r in rule.args]
        out = vals[0]
        for v in vals[1:]:
            out = np.maximum(out, v)
        return out
    if isinstance(rule, Sum):
        return sum(eval_rule(row, r) for r in rule.args)
    if isinstance(rule, Product):
        out = 1
        for r in rule.args:
            v = eval_rule(row, r)
            if not np.isin(v, (0, 1)).all():
                raise RuleError("product rules combine 0/1 conditions only")
            out = out * v
        return out
    if isinstance(rule, GreaterEq):
        inner = _lookup(row, rule.arg) if isinstance(rule.arg, str) else eval_rule(row, rule.arg)
        res = np.asarray(inner) >= rule.bound
        return int(res) if res.ndim == 0 else res.astype(int)
    raise RuleError(f"unknown rule node {rule!r}")


def rule_features(rule: Rule) -> list[str]:
    """Features referenced by ``rule``, in first-use order."""
    out: list[str] = []

    def walk(node):
        if isinstance(node, str):
            names = [node]
        elif isinstance(node, Step):
            names = [node.feature]
        elif isinstance(node, GreaterEq):
            walk(node.arg)
            return
        else:
            for child in node.args:
                walk(child)
            return
        for n in names:
            if n not in out:
                out.append(n)

    walk(rule)
    return out


def rule_to_dict(rule: Rule) -> dict:
    if isinstance(rule, Step):
        return {"op": "step", "feature": rule.feature, "table": rule.table.to_dict()}
    if isinstance(rule, (Max, Sum, Product)):
        op = {Max: "max", Sum: "sum", Product: "product"}[type(rule)]
        return {"op": op, "args": [rule_to_dict(r) for r in rule.args]}
    if isinstance(rule, GreaterEq):
        arg = rule.arg if isinstance(rule.arg, str) else rule_to_dict(rule.arg)
        return {"op": "geq", "arg": arg, "bound": rule.bound}
    raise RuleError(f"unknown rule node {rule!r}")


def rule_from_dict(payload) -> Rule:
    if not isinstance(payload, dict) or "op" not in payload:
        raise ConfigError(f"malformed rule: {payload!r}")
    op = payload["op"]
    if op == "step":
        _check_keys(payload, {"op", "feature", "table"}, "step rule")
        return Step(payload["feature"], ThresholdTable.from_dict(payload["table"]))
    if op in ("max", "sum", "product"):
        _check_keys(payload, {"op", "args"}, f"{op} rule")
        args = tuple(rule_from_dict(a) for a in payload["args"])
        if len(args) < 2:
            raise ConfigError(f"{op} rule needs at least two arguments")
        return {"max": Max, "sum": Sum, "product": Product}[op](args)
    if op == "geq":
        _check_keys(payload, {"op", "arg", "bound"}, "geq rule")
        arg = payload["arg"]
        return GreaterEq(arg if isinstance(arg, str) else rule_from_dict(arg), float(payload["bound"]))
    raise ConfigError(f"unknown rule op {op!r}")


def _check_keys(payload, allowed, what):
    unknown = set(payload) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {what}: {sorted(unknown)}")


@dataclass(frozen=True)
class LatentSpec:
    name: str
    kind: str = "normal"
    icc: float = 0.0
    drivers: dict[str, float] = field(default_factory=dict)
    probs: tuple[float, ...] = ()
    centers: tuple[float, ...] = ()
    jitter: tuple[float, ...] = ()
    p: float = 0.5

    @classmethod
    def from_dict(cls, payload):
        _check_keys(payload, {"name", "kind", "icc", "drivers", "probs", "centers", "jitter", "p"}, "latent")
        kw = dict(payload)
        for key in ("probs", "centers", "jitter"):
            if key in kw:
                val = kw[key]
                kw[key] = tuple(float(v) for v in (val if isinstance(val, list) else [val]))
        return cls(**kw)

    def to_dict(self):
        out = {"name": self.name, "kind": self.kind, "icc": self.icc, "drivers": self.drivers}
        if self.kind == "staged":
            out.update(probs=list(self.probs), centers=list(self.centers), jitter=list(self.jitter))
        if self.kind == "bernoulli":
            out["p"] = self.p
        return out


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    loadings: dict[str, float]
    noise_sd: float = 1.0
    offset: float = 0.0
    transform: str = "identity"
    kind: str = CONTINUOUS
    clip: tuple[float, float] | None = None
    decimals: int | None = None

    @classmethod
    def from_dict(cls, payload):
        _check_keys(payload, {"name", "loadings", "noise_sd", "offset", "transform", "kind", "clip", "decimals"},
                    "feature")
        kw = dict(payload)
        if kw.get("clip") is not None:
            kw["clip"] = tuple(float(c) for c in kw["clip"])
        return cls(**kw)

    def to_dict(self):
        return {
            "name": self.name,
            "loadings": self.loadings,
            "noise_sd": self.noise_sd,
            "offset": self.offset,
            "transform": self.transform,
            "kind": self.kind,
            "clip": list(self.clip) if self.clip else None,
            "decimals": self.decimals,
        }


@dataclass(frozen=True)
class GenConfig:
    name: str
    n_patients: int
    rows_per_patient: tuple[int, int]
    latents: tuple[LatentSpec, ...]
    features: tuple[FeatureSpec, ...]
    rule: Rule
    label_name: str = "label"
    group_name: str = "pid"
    seed: int = 1

    def with_seed(self, seed: int) -> "GenConfig":
        return GenConfig(**{**self.__dict__, "seed": int(seed)})

    def with_rows(self, n_rows: int) -> "GenConfig":
        """Same config with the patient count scaled to give about ``n_rows`` rows."""
        mean_rows = sum(self.rows_per_patient) / 2
        return GenConfig(**{**self.__dict__, "n_patients": max(2, round(n_rows / mean_rows))})

    def validate(self):
        if self.n_patients < 1:
            raise GenerationError("n_patients must be positive")
        lo, hi = self.rows_per_patient
        if not 1 <= lo <= hi:
            raise GenerationError("rows_per_patient must satisfy 1 <= low <= high")
        seen: dict[str, LatentSpec] = {}
        for lat in self.latents:
            if lat.name in seen:
                raise GenerationError(f"duplicate latent {lat.name!r}")
            if not 0 <= lat.icc <= 1:
                raise GenerationError(f"latent {lat.name!r}: icc must lie in [0, 1]")
            for drv, w in lat.drivers.items():
                if drv not in seen or seen[drv].kind != "normal":
                    raise GenerationError(f"latent {lat.name!r}: driver {drv!r} must be an earlier normal latent")
                if not math.isfinite(w):
                    raise GenerationError(f"latent {lat.name!r}: non-finite driver weight")
            if sum(w * w for w in lat.drivers.values()) >= 1:
                raise GenerationError(f"latent {lat.name!r}: squared driver weights must sum below 1")
            if lat.kind == "staged":
                if not lat.probs or abs(sum(lat.probs) - 1) > 1e-9 or min(lat.probs) <= 0:
                    raise GenerationError(f"latent {lat.name!r}: stage probabilities must be positive and sum to 1")
                jit = lat.jitter if len(lat.jitter) != 1 else lat.jitter * len(lat.probs)
                if len(lat.centers) != len(lat.probs) or len(jit) != len(lat.probs):
                    raise GenerationError(f"latent {lat.name!r}: need one center and jitter per stage")
                if min(jit) < 0:
                    raise GenerationError(f"latent {lat.name!r}: jitter must be non-negative")
            elif lat.kind == "bernoulli":
                if not 0 < lat.p < 1:
                    raise GenerationError(f"latent {lat.name!r}: p must lie in (0, 1)")
            elif lat.kind != "normal":
                raise GenerationError(f"latent {lat.name!r}: unknown kind {lat.kind!r}")
            seen[lat.name] = lat
        names = set()
        for feat in self.features:
            if feat.name in names or feat.name in (self.label_name, self.group_name):
                raise GenerationError(f"duplicate column name {feat.name!r}")
            names.add(feat.name)
            for lat, w in feat.loadings.items():
                if lat not in seen:
                    raise GenerationError(f"feature {feat.name!r} loads on unknown latent {lat!r}")
                if not math.isfinite(w):
                    raise GenerationError(f"feature {feat.name!r}: non-finite loading")
            if feat.transform not in ("identity", "lognormal"):
                raise GenerationError(f"feature {feat.name!r}: unknown transform {feat.transform!r}")
            if feat.kind == BINARY:
                if len(feat.loadings) != 1 or seen[next(iter(feat.loadings))].kind != "bernoulli":
                    raise GenerationError(f"binary feature {feat.name!r} must copy one bernoulli latent")
                if feat.noise_sd != 0:
                    raise GenerationError(f"binary feature {feat.name!r} cannot carry noise")
            elif feat.kind == CONTINUOUS:
                if not feat.noise_sd > 0:
                    raise GenerationError(f"feature {feat.name!r}: noise_sd must be positive")
            else:
                raise GenerationError(f"feature {feat.name!r}: unknown kind {feat.kind!r}")
        for ref in rule_features(self.rule):
            if ref not in names:
                raise GenerationError(f"rule references unknown feature {ref!r}")

    def to_dict(self):
        return {
            "name": self.name,
            "n_patients": self.n_patients,
            "rows_per_patient": list(self.rows_per_patient),
            "seed": self.seed,
            "label_name": self.label_name,
            "group_name": self.group_name,
            "latents": [lat.to_dict() for lat in self.latents],
            "features": [f.to_dict() for f in self.features],
            "rule": rule_to_dict(self.rule),
        }

    @classmethod
    def from_dict(cls, payload):
        _check_keys(payload, {"name", "n_patients", "rows_per_patient", "seed", "label_name", "group_name",
                              "latents", "features", "rule", "description"}, "generator config")
        try:
            cfg = cls(
                name=payload.get("name", "synthetic"),
                n_patients=int(payload["n_patients"]),
                rows_per_patient=tuple(int(v) for v in payload["rows_per_patient"]),
                latents=tuple(LatentSpec.from_dict(x) for x in payload["latents"]),
                features=tuple(FeatureSpec.from_dict(x) for x in payload["features"]),
                rule=rule_from_dict(payload["rule"]),
                label_name=payload.get("label_name", "label"),
                group_name=payload.get("group_name", "pid"),
                seed=int(payload.get("seed", 1)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid generator config: {exc}") from exc
        cfg.validate()
        return cfg


def load_config(path) -> GenConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"generator config not found: {path}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    return GenConfig.from_dict(payload)


PRESETS = ("liver", "kidney", "sepsis")


def preset(name: str) -> GenConfig:
    """Built-in generator configs for the liver, kidney and Sepsis-3 archetypes."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    text = resources.files("gam_audit.presets").joinpath(f"{name}.json").read_text(encoding="utf-8")
    return GenConfig.from_dict(json.loads(text))


def _liability(lat: LatentSpec, values, patient_z, row_z):
    e = math.sqrt(lat.icc) * patient_z + math.sqrt(1 - lat.icc) * row_z
    w2 = sum(w * w for w in lat.drivers.values())
    out = math.sqrt(1 - w2) * e
    for drv, w in lat.drivers.items():
        out = out + w * values[drv]
    return out


def generate(cfg: GenConfig) -> Dataset:
    """Draw a dataset; identical configs (including seed) give identical data."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    lo, hi = cfg.rows_per_patient
    sizes = rng.integers(lo, hi + 1, size=cfg.n_patients)
    pid = np.repeat(np.arange(1, cfg.n_patients + 1), sizes)
    n = len(pid)

    latent: dict[str, np.ndarray] = {}
    for lat in cfg.latents:
        patient_z = rng.standard_normal(cfg.n_patients)[pid - 1]
        row_z = rng.standard_normal(n)
        liab = _liability(lat, latent, patient_z, row_z)
        if lat.kind == "normal":
            latent[lat.name] = liab
        elif lat.kind == "staged":
            cum = np.cumsum(lat.probs)[:-1]
            cuts = np.array([_NORMAL.inv_cdf(min(max(c, 1e-12), 1 - 1e-12)) for c in cum])
            stage = np.searchsorted(cuts, liab, side="right")
            jitter = np.asarray(lat.jitter if len(lat.jitter) != 1 else lat.jitter * len(lat.probs))
            latent[lat.name] = np.asarray(lat.centers)[stage] + jitter[stage] * rng.standard_normal(n)
        else:
            latent[lat.name] = (liab > _NORMAL.inv_cdf(1 - lat.p)).astype(float)

    columns: dict[str, np.ndarray] = {}
    kinds: dict[str, str] = {}
    for feat in cfg.features:
        if feat.kind == BINARY:
            columns[feat.name] = latent[next(iter(feat.loadings))].copy()
            kinds[feat.name] = BINARY
            continue
        raw = np.full(n, feat.offset)
        for lat_name, w in feat.loadings.items():
            raw = raw + w * latent[lat_name]
        raw = raw + feat.noise_sd * rng.standard_normal(n)
        if feat.transform == "lognormal":
            raw = np.exp(raw)
        if feat.clip is not None:
            raw = np.clip(raw, *feat.clip)
        if feat.decimals is not None:
            raw = np.round(raw, feat.decimals)
        columns[feat.name] = raw
        kinds[feat.name] = CONTINUOUS

    label = np.asarray(eval_rule(columns, cfg.rule), dtype=float)
    return Dataset(
        columns=columns,
        kinds=kinds,
        label=label,
        group_id=pid.astype(np.int64),
        label_name=cfg.label_name,
        group_name=cfg.group_name,
    )


def write_sidecar(cfg: GenConfig, path) -> None:
    """Echo the labeling rule (and the rest of the config) next to a generated CSV."""
    payload = {"label": cfg.label_name, "rule": rule_to_dict(cfg.rule),
               "rule_features": rule_features(cfg.rule), "config": cfg.to_dict()}
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
