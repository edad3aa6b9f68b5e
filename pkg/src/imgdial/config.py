"""Run configuration: defaults, named presets, and the flat config file.

Config files are UTF-8 text, one ``key = value`` per line; blank lines and
``#`` comments are allowed; unknown keys are fatal.  The ``desk`` preset is
sized for CPU experiments on the micro-world; ``paper`` mirrors the
published large-scale hyperparameters and exists for completeness.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path


@dataclass
class RunConfig:
    preset: str = "desk"
    seed: int = 0
    precision: str = "float32"

    # model dimensions
    d_model: int = 32            # text feature width (d1)
    d_feat: int = 16             # generator sub-region feature width (d2)
    d_image_raw: int = 64        # raw image region feature width (d3)
    d_embed_decoder: int = 16    # decoder word embedding width (d4)
    d_embed_encoder: int = 32
    d_noise: int = 16
    d_cond: int = 32
    base_image_side: int = 16    # first-stage output side
    stages: int = 2
    image_side: int = 32         # rendered micro-world resolution
    vocab_size: int = 512
    max_len: int = 64
    disc_channels: int = 8
    backbone_channels: int = 16

    # pretraining
    epochs_text: int = 24
    lr_text: float = 2e-3
    epochs_recon: int = 20
    lr_reconstructor: float = 2e-4
    lambda_ca: float = 1.0
    gan_batch_size: int = 16
    epochs_backbone: int = 3
    lr_backbone: float = 1e-3
    sample_every: int = 0

    # main training
    lr_generator: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 20
    patience: int = 3
    mc_samples: int = 1
    mix_cap: int = 4
    gate: str = "on"
    grad_clip: float = 5.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    latent_stage: int = -1
    val_max_examples: int = 512

    # generation / evaluation
    decode_strategy: str = "greedy"
    beam_width: int = 1
    max_response_len: int = 24
    rouge_beta: float = 1.2
    text_ratio: int = 4

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True, indent=2) + "\n"


PRESETS: dict[str, dict] = {
    "desk": {},  # the defaults above
    "paper": {
        "preset": "paper",
        "precision": "float64",
        "d_model": 512,
        "d_feat": 48,
        "d_image_raw": 768,
        "d_embed_decoder": 300,
        "d_embed_encoder": 300,
        "d_noise": 100,
        "d_cond": 100,
        "base_image_side": 64,
        "stages": 2,
        "image_side": 128,
        "vocab_size": 30000,
        "disc_channels": 64,
        "backbone_channels": 64,
        "lr_reconstructor": 2e-4,
        "lr_generator": 1e-3,
    },
}


def apply_preset(config: RunConfig, preset: str) -> RunConfig:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset: {preset!r} (choose from {sorted(PRESETS)})")
    merged = config.as_dict()
    merged.update(PRESETS[preset])
    merged["preset"] = preset
    return RunConfig(**merged)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _parse_value(key: str, raw: str):
    ftype = _FIELD_TYPES[key]
    raw = raw.strip()
    if ftype == "int":
        return int(raw)
    if ftype == "float":
        return float(raw)
    return raw


def parse_config_file(path, base: RunConfig | None = None) -> RunConfig:
    """Apply ``key = value`` lines from `path` on top of `base`."""
    base = base or RunConfig()
    values = base.as_dict()
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}: line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ValueError(f"{path}: line {lineno}: unknown config key {key!r}")
        try:
            values[key] = _parse_value(key, raw)
        except ValueError as e:
            raise ValueError(f"{path}: line {lineno}: bad value for {key!r}: {raw!r}") from e
    return RunConfig(**values)


def config_help_text() -> str:
    """Every config key with its default and the paper-preset value."""
    lines = ["config keys (key = value per line):"]
    defaults = RunConfig()
    paper = PRESETS["paper"]
    for f in dataclasses.fields(RunConfig):
        default = getattr(defaults, f.name)
        extra = f"   [paper: {paper[f.name]}]" if f.name in paper else ""
        lines.append(f"  {f.name} = {default}{extra}")
    return "\n".join(lines)
