"""Joint training of the response generator on image-grounded and text-only
dialogues.

Image-grounded batches condition on the real picture.  Text-only batches
condition on latent images: the frozen reconstructor maps the concatenated
context and response plus Gaussian noise to an image, a Monte-Carlo sample
of the intractable expectation over the latent.  Because the reconstructor
is frozen, the divergence term of the bound is a constant and only the
reconstruction expectation is ever optimized or reported.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dialogue, Vocabulary, load_png
from .nn import Adam, clip_global_norm
from .reconstructor import ImageReconstructor
from .response import ResponseGenerator
from .text_encoder import TextEncoder


class ReconstructorNotFrozenError(RuntimeError):
    """Latent-image training requires the reconstructor's parameters fixed."""


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step


@dataclass
class TrainingConfig:
    lr_generator: float = 1e-3
    lr_reconstructor: float = 2e-4
    batch_size: int = 32
    mix_cap: int = 4          # at most this many text batches per image batch
    mc_samples: int = 1
    patience: int = 3
    max_epochs: int = 20
    seed: int = 0
    gate_enabled: bool = True
    grad_clip: float = 5.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    latent_stage: int = -1    # which pyramid stage acts as the latent image
    val_max_examples: int = 512
    preset: str = "desk"


@dataclass
class ElboReport:
    """Monte-Carlo reconstruction term; the divergence term is constant by
    construction under a frozen reconstructor, so no value is claimed for it."""

    recon_term: float
    mc_samples: int
    kl_constant: bool = True


# ---------------------------------------------------------------------------
# latent images
# ---------------------------------------------------------------------------


def latent_images(recon: ImageReconstructor, encoder: TextEncoder,
                  id_seqs: list[list[int]], noise: np.ndarray,
                  stage: int = -1) -> np.ndarray:
    """g(text, noise) as plain arrays; stage -1 is the finest resolution."""
    images = recon.reconstruct_batch(encoder, id_seqs, noise, mode="deterministic")
    return images[stage].data


def _require_frozen(recon: ImageReconstructor):
    if not recon.frozen:
        raise ReconstructorNotFrozenError(
            "reconstructor must be pretrained and frozen before latent-image "
            "training; otherwise the bound's divergence term is not constant"
        )


# ---------------------------------------------------------------------------
# batch losses
# ---------------------------------------------------------------------------


def _encode_texts(records: list[Dialogue], vocab: Vocabulary, max_len: int):
    ctx = [vocab.encode(r.flat_context())[:max_len] for r in records]
    rsp = [vocab.encode(list(r.response))[: max_len - 1] for r in records]
    return ctx, rsp


def loss_image_grounded(gen: ResponseGenerator, records: list[Dialogue],
                        vocab: Vocabulary, images: np.ndarray):
    """Mean over the batch of -log P(response | context, real image)."""
    for r in records:
        if r.image_ref is None:
            raise ValueError("image-grounded batch contains a record without an image")
    ctx, rsp = _encode_texts(records, vocab, gen.encoder.max_len)
    nll, counts = gen.nll_batch(ctx, rsp, images, vocab.bos_id, vocab.eos_id)
    return ad.tmean(nll), counts


def loss_textual(gen: ResponseGenerator, recon: ImageReconstructor,
                 records: list[Dialogue], vocab: Vocabulary, mc_samples: int,
                 noise: np.ndarray, latent_stage: int = -1):
    """Mean over the batch of -(1/S) sum_s log P(response | z_s, context).

    `noise` has shape (S, B, d_noise); z_s comes from the frozen
    reconstructor applied to context<sep>response, and no gradient flows
    into it.
    """
    _require_frozen(recon)
    if noise.shape[0] != mc_samples or noise.shape[1] != len(records):
        raise ValueError("noise must have shape (mc_samples, batch, d_noise)")
    ctx, rsp = _encode_texts(records, vocab, gen.encoder.max_len)
    joint = [vocab.encode(r.joint_text())[: gen.encoder.max_len] for r in records]
    total = None
    counts = None
    for s in range(mc_samples):
        z = latent_images(recon, gen.encoder, joint, noise[s], latent_stage)
        nll, counts = gen.nll_batch(ctx, rsp, z, vocab.bos_id, vocab.eos_id)
        total = nll if total is None else total + nll
    return ad.tmean(total * (1.0 / mc_samples)), counts


def estimate_elbo(gen: ResponseGenerator, recon: ImageReconstructor,
                  record: Dialogue, vocab: Vocabulary, mc_samples: int = 1,
                  noise: np.ndarray | None = None,
                  rng: np.random.Generator | None = None,
                  latent_stage: int = -1) -> ElboReport:
    """Monte-Carlo estimate of the bound's reconstruction term for one record.

    Passing the same `noise` (S, 1, d_noise) to two generator checkpoints
    makes their bound difference equal the reconstruction-term difference
    exactly: the divergence term cannot move while the reconstructor is
    frozen.
    """
    _require_frozen(recon)
    if noise is None:
        if rng is None:
            raise ValueError("provide noise or an rng")
        noise = rng.standard_normal((mc_samples, 1, recon.d_noise))
    with ad.no_grad():
        loss, _ = loss_textual(gen, recon, [record], vocab, mc_samples, noise,
                               latent_stage)
    return ElboReport(recon_term=-float(loss.item()), mc_samples=mc_samples)


# ---------------------------------------------------------------------------
# perplexity evaluation
# ---------------------------------------------------------------------------


def _eval_noise(seed: int, index: int, d_noise: int) -> np.ndarray:
    """One fixed latent draw per example, stable across epochs and runs."""
    g = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 9181, index))))
    return g.standard_normal(d_noise)


def evaluate_perplexity(gen: ResponseGenerator, recon: ImageReconstructor | None,
                        records: list[Dialogue], vocab: Vocabulary,
                        image_root, *, seed: int = 0, batch_size: int = 32,
                        latent_stage: int = -1, max_examples: int | None = None):
    """Pooled token-level perplexity of ground-truth responses.

    Records with images condition on the real image; text-only records
    condition on a latent image reconstructed from the context with one
    fixed noise draw per example.  Returns (ppl, total_nll, n_tokens).
    """
    if not records:
        raise ValueError("empty evaluation set")
    if max_examples is not None:
        records = records[:max_examples]
    image_root = Path(image_root) if image_root is not None else None
    max_len = gen.encoder.max_len
    total_nll, total_tokens = 0.0, 0
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        ctx, rsp = _encode_texts(chunk, vocab, max_len)
        grounded = [r.image_ref is not None for r in chunk]
        if all(grounded):
            images = np.stack([load_png(image_root / r.image_ref) for r in chunk])
        elif not any(grounded):
            if recon is None:
                raise ValueError("text-only evaluation needs the reconstructor")
            _require_frozen(recon)
            noise = np.stack([
                _eval_noise(seed, start + i, recon.d_noise) for i in range(len(chunk))
            ])
            with ad.no_grad():
                images = latent_images(recon, gen.encoder, ctx, noise, latent_stage)
        else:
            raise ValueError("mixed grounded/text-only batch; split the dataset")
        with ad.no_grad():
            nll, counts = gen.nll_batch(ctx, rsp, images, vocab.bos_id, vocab.eos_id)
        total_nll += float(nll.data.sum())
        total_tokens += int(counts.sum())
    return float(np.exp(total_nll / total_tokens)), total_nll, total_tokens


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    log_rows: list[dict] = field(default_factory=list)
    val_ppl_by_epoch: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_ppl: float = float("inf")
    best_state: dict | None = None
    stopped_early: bool = False


def train(gen: ResponseGenerator, recon: ImageReconstructor | None,
          d_i_train: list[Dialogue], d_t_train: list[Dialogue],
          d_i_valid: list[Dialogue], d_t_valid: list[Dialogue],
          vocab: Vocabulary, image_root, config: TrainingConfig,
          log=None) -> TrainResult:
    """Interleaved optimization of the response generator; everything else
    stays frozen.  Stops when validation perplexity has not improved for
    `patience` consecutive epochs and keeps the best-epoch parameters.
    """
    if not d_i_train and not d_t_train:
        raise ValueError("no training data")
    if d_t_train:
        if recon is None:
            raise ValueError("text-only training data needs a reconstructor")
        _require_frozen(recon)
    image_root = Path(image_root) if image_root is not None else None

    rng = np.random.Generator(np.random.PCG64(config.seed))
    opt = Adam(gen.params(), lr=config.lr_generator, beta1=config.adam_beta1,
               beta2=config.adam_beta2, eps=config.adam_eps)

    image_cache: dict[str, np.ndarray] = {}

    def real_images(chunk):
        out = []
        for r in chunk:
            if r.image_ref not in image_cache:
                image_cache[r.image_ref] = load_png(image_root / r.image_ref)
            out.append(image_cache[r.image_ref])
        return np.stack(out)

    n_i = len(d_i_train)
    n_t = len(d_t_train)
    ratio = 0
    if n_i and n_t:
        ratio = min(config.mix_cap, max(1, round(n_t / n_i)))

    result = TrainResult()
    step = 0
    for epoch in range(config.max_epochs):
        i_order = rng.permutation(n_i) if n_i else np.array([], dtype=int)
        t_order = rng.permutation(n_t) if n_t else np.array([], dtype=int)
        i_batches = [
            [d_i_train[j] for j in i_order[s : s + config.batch_size]]
            for s in range(0, n_i, config.batch_size)
        ]
        t_batches = [
            [d_t_train[j] for j in t_order[s : s + config.batch_size]]
            for s in range(0, n_t, config.batch_size)
        ]
        # one image batch, then up to `ratio` text batches, repeating; any
        # leftover batches run at the end so each epoch sees all the data
        schedule: list[tuple[str, list[Dialogue]]] = []
        ti = 0
        for ib in i_batches:
            schedule.append(("image", ib))
            for _ in range(ratio):
                if ti < len(t_batches):
                    schedule.append(("text", t_batches[ti]))
                    ti += 1
        schedule.extend(("text", tb) for tb in t_batches[ti:])

        for split, chunk in schedule:
            if split == "image":
                loss, counts = loss_image_grounded(gen, chunk, vocab,
                                                   real_images(chunk))
            else:
                noise = rng.standard_normal(
                    (config.mc_samples, len(chunk), recon.d_noise)
                )
                loss, counts = loss_textual(gen, recon, chunk, vocab,
                                            config.mc_samples, noise,
                                            config.latent_stage)
            loss_val = float(loss.item())
            if not np.isfinite(loss_val):
                raise TrainingDivergedError(step, loss_val)
            opt.zero_grad()
            loss.backward()
            clip_global_norm(opt.params, config.grad_clip)
            opt.step()
            batch_ppl = float(np.exp(loss_val * len(chunk) / counts.sum()))
            row = {"step": step, "split": split, "loss": loss_val, "ppl": batch_ppl}
            result.log_rows.append(row)
            if log is not None:
                log(row)
            step += 1

        val_parts = []
        if d_i_valid:
            val_parts.append(evaluate_perplexity(
                gen, recon, d_i_valid, vocab, image_root, seed=config.seed,
                batch_size=config.batch_size, latent_stage=config.latent_stage,
                max_examples=config.val_max_examples))
        if d_t_valid:
            val_parts.append(evaluate_perplexity(
                gen, recon, d_t_valid, vocab, image_root, seed=config.seed,
                batch_size=config.batch_size, latent_stage=config.latent_stage,
                max_examples=config.val_max_examples))
        if not val_parts:
            raise ValueError("no validation data")
        nll = sum(p[1] for p in val_parts)
        tokens = sum(p[2] for p in val_parts)
        val_ppl = float(np.exp(nll / tokens))
        result.val_ppl_by_epoch.append(val_ppl)
        row = {"step": step, "split": "valid", "loss": nll / tokens, "ppl": val_ppl}
        result.log_rows.append(row)
        if log is not None:
            log(row)

        if val_ppl < result.best_ppl:
            result.best_ppl = val_ppl
            result.best_epoch = epoch
            result.best_state = {k: v.data.copy() for k, v in gen.named_params().items()}
        if epoch - result.best_epoch >= config.patience:
            result.stopped_early = True
            break

    if result.best_state is not None:
        gen.load_state_arrays(result.best_state)
    return result
