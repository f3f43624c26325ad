"""Run configuration: one JSON document, strict keys, defaults for everything.

A config file may specify any subset of the schema; missing values fall back
to the defaults below, and unknown keys anywhere in the tree are rejected
before any work starts. Rank schedules accept either an explicit per-block
list ({"ranks": [...]}) or stepped-schedule parameters
({"start", "end", "step", "period"}).
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass

from .adapters import RankVector, stepped_schedule
from .model import DecoderConfig
from .training import AdamConfig


class ConfigError(ValueError):
    """Malformed or contradictory run configuration."""


DEFAULTS: dict = {
    "model": {
        "blocks": 12,
        "d_model": 64,
        "heads": 4,
        "vocab": 160,
        "max_seq": 128,
        "scenes": 256,
    },
    "lora": {"ranks": [12, 12, 12, 12, 8, 8, 8, 8, 6, 6, 6, 6]},
    "mora": {"ranks": [24, 24, 24, 24, 16, 16, 16, 16, 12, 12, 12, 12]},
    "training": {
        "lr": 2e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "batch_size": 4,
        "epochs": 5,
    },
    "data": {"train_size": 480, "val_size": 48, "seed": 0},
    "forget": {"seeds": [0, 1, 2, 3, 4], "stage1_epochs": 5, "stage2_epochs": 5},
    "riskcov": {"metric": "rougeL", "max_new": 12},
    "output_dir": "out",
}


# Sections replaced wholesale instead of key-merged: a schedule is either an
# explicit rank list or stepped-schedule parameters, never a mixture with the
# default.
_REPLACE_SECTIONS = {"lora", "mora"}


def _merge(defaults, override, path=""):
    if not isinstance(override, dict):
        raise ConfigError(f"expected an object at {path or 'top level'}")
    out = copy.deepcopy(defaults)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key {where!r}")
        if key in _REPLACE_SECTIONS and not path:
            out[key] = copy.deepcopy(value)
        elif isinstance(defaults[key], dict):
            out[key] = _merge(defaults[key], value, where)
        else:
            out[key] = value
    return out


def _schedule(section: dict, blocks: int, name: str) -> RankVector:
    keys = set(section)
    if keys == {"ranks"}:
        ranks = RankVector(tuple(section["ranks"]))
        if len(ranks) != blocks:
            raise ConfigError(f"{name}.ranks has {len(ranks)} entries for {blocks} blocks")
        return ranks
    if keys == {"start", "end", "step", "period"}:
        return stepped_schedule(section["start"], section["end"], section["step"],
                                section["period"], blocks)
    raise ConfigError(
        f"{name} must give either 'ranks' or all of 'start', 'end', 'step', 'period'; got {sorted(keys)}"
    )


@dataclass(frozen=True)
class RunConfig:
    model: DecoderConfig
    lora: RankVector
    mora: RankVector
    adam: AdamConfig
    batch_size: int
    epochs: int
    train_size: int
    val_size: int
    data_seed: int
    forget_seeds: tuple[int, ...]
    stage1_epochs: int
    stage2_epochs: int
    riskcov_metric: str
    riskcov_max_new: int
    output_dir: str
    raw: dict  # fully-merged snapshot; the source of truth for hashing

    @classmethod
    def from_dict(cls, overrides: dict | None = None) -> "RunConfig":
        raw = _merge(DEFAULTS, overrides or {})
        m = raw["model"]
        try:
            model = DecoderConfig(vocab=int(m["vocab"]), blocks=int(m["blocks"]),
                                  d_model=int(m["d_model"]), heads=int(m["heads"]),
                                  max_seq=int(m["max_seq"]), scenes=int(m["scenes"]))
            lora = _schedule(raw["lora"], model.blocks, "lora")
            mora = _schedule(raw["mora"], model.blocks, "mora")
        except (ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc
        # Model-construction contracts surface now, not after corpora exist.
        for r in mora:
            if r % 2 or r >= model.fused_dim:
                raise ConfigError(f"mora rank {r} must be even and below {model.fused_dim}")
        for r in lora:
            if r >= min(model.d_model, model.fused_dim):
                raise ConfigError(f"lora rank {r} must be below {model.d_model}")
        t = raw["training"]
        d = raw["data"]
        f = raw["forget"]
        rc = raw["riskcov"]
        if not f["seeds"]:
            raise ConfigError("forget.seeds must be non-empty")
        if rc["metric"] not in ("rougeL", "token-accuracy"):
            raise ConfigError(f"riskcov.metric must be rougeL or token-accuracy, got {rc['metric']!r}")
        return cls(
            model=model, lora=lora, mora=mora,
            adam=AdamConfig(lr=float(t["lr"]), beta1=float(t["beta1"]),
                            beta2=float(t["beta2"]), eps=float(t["eps"])),
            batch_size=int(t["batch_size"]), epochs=int(t["epochs"]),
            train_size=int(d["train_size"]), val_size=int(d["val_size"]),
            data_seed=int(d["seed"]),
            forget_seeds=tuple(int(s) for s in f["seeds"]),
            stage1_epochs=int(f["stage1_epochs"]), stage2_epochs=int(f["stage2_epochs"]),
            riskcov_metric=str(rc["metric"]), riskcov_max_new=int(rc["max_new"]),
            output_dir=str(raw["output_dir"]),
            raw=raw,
        )

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(data)

    def model_fingerprint(self) -> str:
        """Hash of everything that determines parameter shapes and meaning."""
        payload = {
            "model": self.raw["model"],
            "lora": list(self.lora),
            "mora": list(self.mora),
        }
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()
