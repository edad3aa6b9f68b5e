"""Assembly of model components from a RunConfig, plus checkpoint wiring.

Every pipeline stage reads its prerequisites from an artifacts directory by
fixed file name and writes its own outputs next to them:

    text_encoder.ckpt      frozen text encoder
    reconstructor.ckpt     frozen image reconstructor
    discriminators.ckpt    frozen per-stage discriminators
    backbone.ckpt          frozen image feature backbone
    generator.ckpt         trained response generator
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import Vocabulary, load_dataset
from .reconstructor import Discriminator, ImageReconstructor, build_discriminators
from .response import ImageBackbone, ResponseGenerator
from .text_encoder import TextEncoder

TEXT_ENCODER_FILE = "text_encoder.ckpt"
RECONSTRUCTOR_FILE = "reconstructor.ckpt"
DISCRIMINATORS_FILE = "discriminators.ckpt"
BACKBONE_FILE = "backbone.ckpt"
GENERATOR_FILE = "generator.ckpt"


def seeded_rng(seed: int, *tags) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed,) + tags)))


def make_text_encoder(config: RunConfig, vocab_size: int, seed: int) -> TextEncoder:
    return TextEncoder(seeded_rng(seed, 1), vocab_size, d_model=config.d_model,
                       d_embed=config.d_embed_encoder, max_len=config.max_len)


def make_reconstructor(config: RunConfig, seed: int) -> ImageReconstructor:
    return ImageReconstructor(
        seeded_rng(seed, 2), d_words=config.d_model, d_feat=config.d_feat,
        d_noise=config.d_noise, d_cond=config.d_cond,
        base_out_side=config.base_image_side, stages=config.stages,
    )


def make_discriminators(config: RunConfig, recon: ImageReconstructor,
                        seed: int) -> list[Discriminator]:
    return build_discriminators(seeded_rng(seed, 3), recon, d_text=config.d_model,
                                base_channels=config.disc_channels)


def make_backbone(config: RunConfig, seed: int) -> ImageBackbone:
    return ImageBackbone(seeded_rng(seed, 4), d_out=config.d_image_raw,
                         base_channels=config.backbone_channels)


def make_generator(config: RunConfig, vocab_size: int, encoder: TextEncoder,
                   backbone: ImageBackbone, seed: int) -> ResponseGenerator:
    return ResponseGenerator(
        seeded_rng(seed, 5), vocab_size=vocab_size, d_model=config.d_model,
        d_embed=config.d_embed_decoder, d_image_raw=config.d_image_raw,
        encoder=encoder, backbone=backbone, gate_enabled=config.gate == "on",
    )


def save_module(module, path, *, component: str, config: RunConfig,
                extra_meta: dict | None = None):
    meta = {
        "component": component,
        "frozen": module.frozen,
        "package_version": __version__,
        "preset": config.preset,
        "precision": config.precision,
    }
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, module.state_arrays(), meta)


def load_module(module, path, *, expect_component: str):
    tensors, meta = load_checkpoint(path)
    if meta.get("component") != expect_component:
        raise ValueError(
            f"{path}: expected component {expect_component!r}, "
            f"found {meta.get('component')!r}"
        )
    module.load_state_arrays(tensors)
    if meta.get("frozen"):
        module.freeze()
    return meta


def save_discriminators(discs: list[Discriminator], path, config: RunConfig):
    tensors = {}
    for i, d in enumerate(discs):
        tensors.update({f"disc{i}.{k}": v for k, v in d.state_arrays().items()})
    save_checkpoint(path, tensors, {
        "component": "discriminators",
        "frozen": all(d.frozen for d in discs),
        "package_version": __version__,
        "count": len(discs),
    })


def load_discriminators(discs: list[Discriminator], path):
    tensors, meta = load_checkpoint(path)
    for i, d in enumerate(discs):
        prefix = f"disc{i}."
        own = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
        d.load_state_arrays(own)
        if meta.get("frozen"):
            d.freeze()
    return meta


def dataset_dir_files(data_dir) -> dict[str, Path]:
    data_dir = Path(data_dir)
    return {name: data_dir / f"{name}.jsonl" for name in (
        "image_train", "image_valid", "image_test",
        "text_train", "text_valid", "text_test",
    )}


def load_split(data_dir, name: str):
    path = dataset_dir_files(data_dir)[name]
    if not path.exists():
        raise FileNotFoundError(f"missing dataset file: {path}")
    return load_dataset(path)


def load_vocab(data_dir) -> Vocabulary:
    path = Path(data_dir) / "vocab.txt"
    if not path.exists():
        raise FileNotFoundError(f"missing vocabulary file: {path}")
    return Vocabulary.load(path)


def apply_precision(config: RunConfig):
    ad.set_dtype(config.precision)
