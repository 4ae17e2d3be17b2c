"""Run configuration: one JSON document, schema-checked, with canonical and per-section hashes."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

from .datasets import ToyDomainSpec, load_folder_dataset, toy_catalog, toy_samples
from .errors import ValidationError
from .text_prototypes import FACTOR_COLOR, FACTOR_TEXTURE, ClassCatalog
from .training import AugmentConfig, TrainConfig

# keys a user may set in each section, with defaults
DEFAULTS = {
    "seed": 0,
    "output_dir": "runs/default",
    "catalog": {"toy": True},
    "dataset": {"id": "toy-source", "toy": {"preset": "source", "count": 200, "size": 64}},
    "provider": {"name": "stub", "dim": 512},
    "factors": {"enabled": [FACTOR_COLOR, FACTOR_TEXTURE]},
    "alignment": {"on": True, "tau": 0.1, "eps": 1e-8, "shallow_stages": ["S1"]},
    "reweighting": {"on": True, "scope": "batch"},
    "training": {},
    "evaluation": {"targets": {"toy-target": {"toy": {"preset": "target", "count": 100, "size": 64}}}},
}

# training keys owned by other sections
_DERIVED_TRAIN_KEYS = {"seed", "ppa_lt", "ppa_c", "pr", "tau", "eps", "shallow_stages", "minmax_scope"}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - _DERIVED_TRAIN_KEYS

_SECTION_KEYS = {
    "catalog": {"toy", "names", "path", "ignore_index"},
    "dataset": {"id", "toy", "path"},
    "provider": {"name", "dim", "seed", "buckets", "command", "provider_id", "weights_dir", "device"},
    "factors": {"enabled"},
    "alignment": {"on", "tau", "eps", "shallow_stages"},
    "reweighting": {"on", "scope"},
    "training": _TRAIN_KEYS,
    "evaluation": {"targets"},
}


def canonical_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(blob.encode()).hexdigest()


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("toy", "targets") else copy.deepcopy(v)
    return out


def _check_source(where: str, src: dict) -> None:
    if not isinstance(src, dict) or ("path" in src) == ("toy" in src):
        raise ValidationError(f"{where}: give exactly one of 'path' or 'toy'")
    if "toy" in src:
        toy = src["toy"]
        unknown = set(toy) - {"spec", "preset", "count", "size"}
        if unknown:
            raise ValidationError(f"{where}.toy: unknown keys {sorted(unknown)}")


@dataclass(frozen=True)
class RunConfig:
    """Resolved, validated run configuration."""

    doc: dict

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ValidationError("config must be a JSON object")
        unknown = set(raw) - set(DEFAULTS)
        if unknown:
            raise ValidationError(f"unknown config keys {sorted(unknown)}")
        for section, allowed in _SECTION_KEYS.items():
            if section in raw:
                if not isinstance(raw[section], dict):
                    raise ValidationError(f"section {section!r} must be an object")
                bad = set(raw[section]) - allowed
                if bad:
                    raise ValidationError(f"unknown keys in {section!r}: {sorted(bad)}")
        doc = _merge(DEFAULTS, raw)
        if "path" in raw.get("dataset", {}):
            doc["dataset"].pop("toy", None)
        if "names" in raw.get("catalog", {}) or "path" in raw.get("catalog", {}):
            doc["catalog"].pop("toy", None)
        _check_source("dataset", doc["dataset"])
        for name, target in doc["evaluation"]["targets"].items():
            _check_source(f"evaluation.targets.{name}", target)
        factors = doc["factors"]["enabled"]
        if not isinstance(factors, list) or set(factors) - {FACTOR_COLOR, FACTOR_TEXTURE}:
            raise ValidationError(f"factors.enabled must be a subset of ['color', 'texture'], got {factors}")
        doc["factors"]["enabled"] = sorted(set(factors))
        cfg = cls(doc)
        cfg.train_config()  # surfaces value errors before any work
        cfg.catalog()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError as exc:
            raise ValidationError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw)

    def with_overrides(self, seed=None, output_dir=None) -> "RunConfig":
        doc = copy.deepcopy(self.doc)
        if seed is not None:
            doc["seed"] = int(seed)
        if output_dir is not None:
            doc["output_dir"] = str(output_dir)
        return RunConfig.from_dict(doc)

    # --- hashes ---------------------------------------------------------

    @property
    def hash(self) -> str:
        # where outputs land does not change what they contain
        return canonical_hash({k: v for k, v in self.doc.items() if k != "output_dir"})

    def section_hash(self, *sections: str) -> str:
        return canonical_hash({s: self.doc[s] for s in sections})

    @property
    def factors_hash(self) -> str:
        return self.section_hash("catalog", "dataset")

    @property
    def prototypes_hash(self) -> str:
        return self.section_hash("catalog", "dataset", "provider", "factors")

    # --- resolved objects ----------------------------------------------

    @property
    def output_dir(self) -> Path:
        return Path(self.doc["output_dir"])

    @property
    def seed(self) -> int:
        return int(self.doc["seed"])

    @property
    def enabled_factors(self) -> list[str]:
        return list(self.doc["factors"]["enabled"])

    def catalog(self) -> ClassCatalog:
        c = self.doc["catalog"]
        ignore = int(c.get("ignore_index", 255))
        if c.get("toy"):
            return toy_catalog(ignore)
        if "names" in c:
            return ClassCatalog.from_names(c["names"], ignore)
        if "path" in c:
            try:
                return ClassCatalog.load(c["path"])
            except FileNotFoundError as exc:
                raise ValidationError(f"catalog file not found: {c['path']}") from exc
        raise ValidationError("catalog needs 'toy', 'names' or 'path'")

    def train_config(self) -> TrainConfig:
        t = dict(self.doc["training"])
        if "augment" in t and t["augment"] is not None:
            t["augment"] = AugmentConfig(**t["augment"])
        for key in ("mpa_stages",):
            if key in t:
                t[key] = tuple(t[key])
        a, r = self.doc["alignment"], self.doc["reweighting"]
        factors = self.enabled_factors
        try:
            return TrainConfig(
                seed=self.seed,
                ppa_c=bool(a["on"]) and FACTOR_COLOR in factors,
                ppa_lt=bool(a["on"]) and FACTOR_TEXTURE in factors,
                pr=bool(r["on"]),
                tau=float(a["tau"]),
                eps=float(a["eps"]),
                shallow_stages=tuple(a["shallow_stages"]),
                minmax_scope=r["scope"],
                **t,
            )
        except TypeError as exc:
            raise ValidationError(f"bad training section: {exc}") from exc

    def source_samples(self):
        return resolve_samples(self.doc["dataset"], self.catalog())

    def target_samples(self) -> dict:
        return {name: resolve_samples(src, self.catalog()) for name, src in self.doc["evaluation"]["targets"].items()}


TOY_PRESETS = ("source", "target")


def toy_spec(toy: dict) -> ToyDomainSpec:
    from .datasets import source_domain, target_domain

    preset = toy.get("preset")
    if preset is not None:
        if preset not in TOY_PRESETS:
            raise ValidationError(f"unknown toy preset {preset!r}, expected one of {TOY_PRESETS}")
        base = (source_domain if preset == "source" else target_domain)()
        return ToyDomainSpec.from_dict({**base.to_dict(), **toy.get("spec", {})})
    return ToyDomainSpec.from_dict(toy.get("spec", {"domain_id": "toy"}))


def resolve_samples(src: dict, catalog: ClassCatalog):
    """A folder dataset or an in-memory toy domain."""
    if "path" in src:
        return load_folder_dataset(src["path"], catalog)
    toy = src["toy"]
    return toy_samples(toy_spec(toy), int(toy.get("count", 200)), int(toy.get("size", 64)))
