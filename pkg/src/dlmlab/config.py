"""Sectioned experiment config (TOML), named seed substreams and run manifests."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli
import tomli_w

import dlmlab


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    name: str = "toy-dlm"
    d_model: int = 64
    n_layers: int = 6
    n_heads: int = 4
    context: int = 64
    rope: bool = True
    steps: int = 2000
    batch_size: int = 8
    lr: float = 3e-3
    warmup: int = 100
    clip_norm: float = 1.0
    finetune_steps: int = 500
    finetune_lr: float = 1e-3
    corpus_chars: int = 400_000


@dataclass
class SaeSection:
    width: int = 1024
    k_act: list[int] = field(default_factory=lambda: [32])
    lam: float = 0.0
    epochs: int = 1
    batch_size: int = 256
    lr: float = 1e-2
    budget: int = 65_536
    layers: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4, 5])
    selector: str = "mask"


@dataclass
class EvalSection:
    protocol: str = "denoising"
    eval_windows: int = 1024
    n_prompts: int = 16
    gen_length: int = 30
    steps: int = 30
    strategy: str = "entropy"


@dataclass
class SteeringSection:
    layer: int = 2
    alpha: float = 2.0
    token_scope: str = "all"
    n_features: int = 4
    features: list[int] = field(default_factory=list)
    n_prefix: int = 5
    gen_length: int = 30
    steps: int = 30
    strategy: str = "entropy"
    lam: float = 0.3
    n_terms: int = 3


@dataclass
class OrderSection:
    strategies: list[str] = field(default_factory=lambda: ["origin", "topk_margin", "entropy"])
    n_prompts: int = 8
    prompt_length: int = 16
    gen_length: int = 32
    steps: int = 16
    k_feat: int = 10


@dataclass
class AutointerpSection:
    judge: str = "substring"
    base_url: str = ""
    model: str = ""
    token_env: str = "DLMLAB_JUDGE_TOKEN"
    timeout: float = 30.0
    retries: int = 3
    max_tokens: int = 262_144
    context_length: int = 128
    n_latents: int = 1000
    latent_batch_size: int = 100
    dead_threshold: int = 15
    n_scoring: int = 14
    max_in_flight: int = 4


SECTIONS = {
    "model": ModelSection,
    "sae": SaeSection,
    "eval": EvalSection,
    "steering": SteeringSection,
    "order": OrderSection,
    "autointerp": AutointerpSection,
}


@dataclass
class ExperimentConfig:
    model: ModelSection = field(default_factory=ModelSection)
    sae: SaeSection = field(default_factory=SaeSection)
    eval: EvalSection = field(default_factory=EvalSection)
    steering: SteeringSection = field(default_factory=SteeringSection)
    order: OrderSection = field(default_factory=OrderSection)
    autointerp: AutointerpSection = field(default_factory=AutointerpSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        errors: list[str] = []
        sections = {}
        for key in raw:
            if key not in SECTIONS:
                errors.append(f"{key}: unknown section")
        for name, section_cls in SECTIONS.items():
            values = raw.get(name, {})
            if not isinstance(values, dict):
                errors.append(f"{name}: expected a table")
                continue
            sections[name] = _build_section(name, section_cls, values, errors)
        if errors:
            raise ConfigError("invalid config:\n  " + "\n  ".join(errors))
        return cls(**sections)

    @classmethod
    def from_toml(cls, text: str) -> "ExperimentConfig":
        try:
            raw = tomli.loads(text)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"config is not valid TOML: {exc}") from exc
        return cls.from_dict(raw)

    @classmethod
    def load(cls, path: str | Path | None) -> "ExperimentConfig":
        if path is None:
            return cls()
        return cls.from_toml(Path(path).read_text("utf-8"))


def _build_section(name: str, section_cls, values: dict, errors: list[str]):
    known = {f.name: f for f in dataclasses.fields(section_cls)}
    default = section_cls()
    kwargs = {}
    for key, val in values.items():
        path = f"{name}.{key}"
        if key not in known:
            errors.append(f"{path}: unknown key")
            continue
        ref = getattr(default, key)
        ok, val = _coerce(ref, val)
        if not ok:
            errors.append(f"{path}: expected {type(ref).__name__}, got {type(val).__name__}")
            continue
        kwargs[key] = val
    return section_cls(**kwargs)


def _coerce(ref, val):
    if isinstance(ref, bool) or isinstance(val, bool):
        return type(ref) is type(val), val
    if isinstance(ref, float) and isinstance(val, int):
        return True, float(val)
    if isinstance(ref, list):
        if not isinstance(val, list):
            return False, val
        if ref and not all(_coerce(ref[0], v)[0] for v in val):
            return False, val
        return True, [(_coerce(ref[0], v)[1] if ref else v) for v in val]
    return isinstance(val, type(ref)), val


# ---------------------------------------------------------------- seeds


SEED_STREAMS = ("init", "corruption", "shuffle", "judge-mock", "generation", "prefix", "eval")


def seed_stream(master: int, name: str) -> np.random.Generator:
    """Independent generator per named component, stable under reordering of other draws."""
    return np.random.default_rng([master, zlib.crc32(name.encode())])


def seed_int(master: int, name: str) -> int:
    return int(seed_stream(master, name).integers(2**31))


# ---------------------------------------------------------------- manifests


MANIFEST_NAME = "manifest.json"


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class OutputExistsError(FileExistsError):
    pass


def prepare_out_dir(out: str | Path, force: bool) -> Path:
    out = Path(out).resolve()
    if (out / MANIFEST_NAME).exists() and not force:
        raise OutputExistsError(f"{out} already holds a run manifest; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seeds: dict[str, int]
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    status: str = "running"
    partial: list[str] = field(default_factory=list)
    wall_clock_s: float = 0.0
    version: str = dlmlab.__version__
    python: str = sys.version.split()[0]
    started: float = field(default_factory=time.time)

    def add_input(self, path: str | Path) -> Path:
        p = Path(path).resolve()
        if not p.exists():
            raise FileNotFoundError(f"input {p} does not exist")
        self.inputs[str(p)] = sha256_file(p)
        return p

    def add_output(self, path: str | Path) -> None:
        p = Path(path).resolve()
        self.outputs[str(p)] = sha256_file(p)

    def finish(self, out_dir: Path, status: str = "ok") -> Path:
        self.status = status
        self.wall_clock_s = time.time() - self.started
        path = Path(out_dir) / MANIFEST_NAME
        path.write_text(json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True) + "\n")
        return path

    def resolved_config(self) -> ExperimentConfig:
        return ExperimentConfig.from_dict(self.config)

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        raw = json.loads(Path(path).read_text())
        return cls(**raw)


def verify_inputs(manifest: RunManifest) -> list[str]:
    """Paths whose current digest no longer matches the manifest."""
    bad = []
    for p, digest in manifest.inputs.items():
        if not Path(p).exists() or sha256_file(p) != digest:
            bad.append(p)
    return bad
