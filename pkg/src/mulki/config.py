"""Experiment configuration: JSON files, environment overrides, variants.

A config file has up to five sections:

    {
      "stream": { ... StreamConfig fields ... },
      "model":  { ... ModelConfig fields ... },
      "hyper":  { ... HyperParams fields ... },
      "seeds":  [0, 1, 2, 3, 4],
      "variant": "full",
      "out_dir": "runs/exp"
    }

Every key is optional and defaults are documented on the dataclasses.
Unknown keys are rejected by name. Environment variables prefixed with
MULKI_ override file values: MULKI_<SECTION>__<KEY> for section fields
(e.g. MULKI_HYPER__LR=0.002, MULKI_STREAM__N_TASKS=3) and MULKI_<KEY>
for top-level fields (e.g. MULKI_SEEDS=[1,2], MULKI_VARIANT=only_fd).
Values are parsed as JSON, falling back to plain strings.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

from .errors import ConfigError
from .runner import HyperParams, ModelConfig, hyper_from_dict, model_config_from_dict
from .taskgen import StreamConfig, stream_config_from_dict

ENV_PREFIX = "MULKI_"

TOP_LEVEL_KEYS = ("stream", "model", "hyper", "seeds", "variant", "out_dir")
SECTIONS = ("stream", "model", "hyper")

# Ablation arms: named overrides applied on top of the configured hyper.
# "full" is the complete method; the component arms keep only what they
# name; the weighting arms change only how the two teachers are mixed.
VARIANTS: dict[str, dict] = {
    "full": {},
    "continual_ft": dict(
        enable_csa=False,
        enable_fd=False,
        enable_ird=False,
        enable_idd=False,
        enable_wc=False,
        enable_we=False,
        enable_ewe=False,
        lambda1=0.0,
        lambda2=0.0,
    ),
    "wo_we_wc": dict(enable_we=False, enable_ewe=False, enable_wc=False),
    "wo_we": dict(enable_we=False, enable_ewe=False),
    "only_fd": dict(enable_csa=False, enable_ird=False, enable_idd=False, enable_wc=False, enable_we=False, enable_ewe=False),
    "only_ird": dict(enable_csa=False, enable_fd=False, enable_idd=False, enable_wc=False, enable_we=False, enable_ewe=False),
    "only_idd": dict(enable_csa=False, enable_fd=False, enable_ird=False, enable_wc=False, enable_we=False, enable_ewe=False),
    "only_mdd": dict(enable_csa=False, enable_wc=False, enable_we=False, enable_ewe=False),
    "only_c0": dict(weighting_mode="only_c0"),
    "only_prev": dict(weighting_mode="only_prev"),
    "average": dict(weighting_mode="average"),
}


@dataclass
class ExperimentConfig:
    stream: StreamConfig = field(default_factory=StreamConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    hyper: HyperParams = field(default_factory=HyperParams)
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    variant: str = "full"
    out_dir: str | None = None

    def echo(self) -> dict:
        """Fully resolved config as plain JSON-serializable data."""
        return {
            "stream": asdict(self.stream),
            "model": asdict(self.model),
            "hyper": asdict(self.hyper),
            "seeds": list(self.seeds),
            "variant": self.variant,
            "out_dir": self.out_dir,
        }


def apply_variant(hyper: HyperParams, variant: str) -> HyperParams:
    """A copy of `hyper` with the named ablation arm's overrides applied."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}")
    merged = asdict(hyper)
    merged.update(VARIANTS[variant])
    return HyperParams(**merged)


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(raw) - set(TOP_LEVEL_KEYS)
    if unknown:
        raise ConfigError(f"unknown config key {sorted(unknown)[0]!r}")
    for section in SECTIONS:
        if section in raw and not isinstance(raw[section], dict):
            raise ConfigError(f"config section {section!r} must be an object")

    seeds = raw.get("seeds", [0, 1, 2, 3, 4])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        raise ConfigError("config key 'seeds' must be a non-empty list of integers")
    variant = raw.get("variant", "full")
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}")
    out_dir = raw.get("out_dir")
    if out_dir is not None and not isinstance(out_dir, str):
        raise ConfigError("config key 'out_dir' must be a string")

    return ExperimentConfig(
        stream=stream_config_from_dict(raw.get("stream", {})),
        model=model_config_from_dict(raw.get("model", {})),
        hyper=hyper_from_dict(raw.get("hyper", {})),
        seeds=list(seeds),
        variant=variant,
        out_dir=out_dir,
    )


def apply_env_overrides(raw: dict, environ=None) -> dict:
    """Merge MULKI_-prefixed environment variables into a raw config dict."""
    environ = os.environ if environ is None else environ
    merged = {k: (dict(v) if isinstance(v, dict) else v) for k, v in raw.items()}
    for name in sorted(environ):
        if not name.startswith(ENV_PREFIX):
            continue
        path = name[len(ENV_PREFIX) :].lower()
        text = environ[name]
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        if "__" in path:
            section, key = path.split("__", 1)
            if section not in SECTIONS:
                raise ConfigError(f"environment override {name}: unknown section {section!r}")
            merged.setdefault(section, {})
            merged[section][key] = value
        else:
            if path not in TOP_LEVEL_KEYS or path in SECTIONS:
                raise ConfigError(f"environment override {name}: unknown config key {path!r}")
            merged[path] = value
    return merged


def load_config(path, environ=None) -> ExperimentConfig:
    """Read a JSON config file and apply environment overrides."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from exc
    return config_from_dict(apply_env_overrides(raw, environ))
