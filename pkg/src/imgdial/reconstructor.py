"""Text-conditioned multi-scale image generation with per-scale adversaries.

The generator grows an image from a small grid to the final resolution.  The
first stage maps [noise, conditioning vector] through a fully connected layer
and three 2x upsampling blocks; each later stage concatenates the previous
sub-region features with word-attended text features, refines them through
two residual blocks, and upsamples.  Every stage has a 3x3 conv + tanh head
emitting an RGB image, and a discriminator with an unconditional and a
text-conditional output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import downscale_area, load_png, save_png
from .nn import Adam, Conv2d, FeatureNorm2d, Linear, Module, clip_global_norm, xavier_init
from .text_encoder import ConditioningAugmenter, TextEncoder, pad_batch

PROB_EPS = 1e-7


@dataclass
class ImagePyramid:
    """Generated images, coarsest first; each entry is (3, side_i**2) in [-1, 1]."""

    images: list[np.ndarray]
    sides: list[int]

    def grid(self, i: int) -> np.ndarray:
        s = self.sides[i]
        return self.images[i].reshape(3, s, s)


# ---------------------------------------------------------------------------
# word attention over sub-regions
# ---------------------------------------------------------------------------


def region_word_attention_batch(words: Tensor, regions: Tensor, proj: Tensor,
                                mask: np.ndarray | None = None) -> Tensor:
    """words (B, d1, L), regions (B, d2, N), proj (d2, d1) -> (B, d2, N).

    Each sub-region scores every word against its own feature and takes the
    softmax-weighted mix of the projected word vectors.
    """
    projected = ad.matmul(proj, words)  # (B, d2, L)
    scores = ad.matmul(ad.swapaxes(regions, -1, -2), projected)  # (B, N, L)
    smask = None if mask is None else mask[:, None, :]
    weights = ad.softmax(scores, axis=-1, mask=smask)  # rows sum to 1 over words
    return ad.matmul(projected, ad.swapaxes(weights, -1, -2))  # (B, d2, N)


def region_word_attention(words: np.ndarray, regions: np.ndarray,
                          proj: np.ndarray) -> np.ndarray:
    """Single-instance form: words (d1, L), regions (d2, N) -> (d2, N)."""
    if words.ndim != 2 or regions.ndim != 2 or proj.ndim != 2:
        raise ValueError("expected 2-d arrays")
    d2, d1 = proj.shape
    if words.shape[0] != d1 or regions.shape[0] != d2:
        raise ValueError(
            f"shape mismatch: proj {proj.shape}, words {words.shape}, regions {regions.shape}"
        )
    with ad.no_grad():
        out = region_word_attention_batch(
            Tensor(words[None]), Tensor(regions[None]), Tensor(proj)
        )
    return out.data[0]


# ---------------------------------------------------------------------------
# generator building blocks
# ---------------------------------------------------------------------------


class UpBlock(Module):
    """2x nearest upsample, 3x3 conv, norm, ReLU."""

    def __init__(self, rng, c_in, c_out):
        super().__init__()
        self.conv = self.add_child("conv", Conv2d(rng, c_in, c_out, 3, pad=1))
        self.norm = self.add_child("norm", FeatureNorm2d(c_out))

    def __call__(self, x):
        return ad.relu(self.norm(self.conv(ad.upsample2x(x))))


class ResBlock(Module):
    def __init__(self, rng, channels):
        super().__init__()
        self.conv1 = self.add_child("conv1", Conv2d(rng, channels, channels, 3, pad=1))
        self.norm1 = self.add_child("norm1", FeatureNorm2d(channels))
        self.conv2 = self.add_child("conv2", Conv2d(rng, channels, channels, 3, pad=1))
        self.norm2 = self.add_child("norm2", FeatureNorm2d(channels))

    def __call__(self, x):
        y = ad.relu(self.norm1(self.conv1(x)))
        return x + self.norm2(self.conv2(y))


class StageZero(Module):
    """[noise, conditioning] -> FC -> (d2, base, base) -> three 2x upsamplings."""

    def __init__(self, rng, d_noise, d_cond, d_feat, out_side):
        super().__init__()
        if out_side % 8:
            raise ValueError("first-stage side must be divisible by 8")
        self.base = out_side // 8
        self.d_feat = d_feat
        self.fc = self.add_child(
            "fc", Linear(rng, d_noise + d_cond, d_feat * self.base * self.base)
        )
        self.up1 = self.add_child("up1", UpBlock(rng, d_feat, d_feat))
        self.up2 = self.add_child("up2", UpBlock(rng, d_feat, d_feat))
        self.up3 = self.add_child("up3", UpBlock(rng, d_feat, d_feat))

    def __call__(self, noise, cond):
        x = self.fc(ad.concat([noise, cond], axis=-1))
        b = x.shape[0]
        x = ad.reshape(x, (b, self.d_feat, self.base, self.base))
        return self.up3(self.up2(self.up1(x)))


class Refiner(Module):
    """Word-attended refinement stage: concat, two residual blocks, upsample."""

    def __init__(self, rng, d_feat, d_words):
        super().__init__()
        self.word_proj = self.add_param(
            "word_proj", xavier_init(rng, d_words, d_feat, (d_feat, d_words))
        )
        self.res1 = self.add_child("res1", ResBlock(rng, 2 * d_feat))
        self.res2 = self.add_child("res2", ResBlock(rng, 2 * d_feat))
        self.up = self.add_child("up", UpBlock(rng, 2 * d_feat, d_feat))

    def __call__(self, feats, words, mask):
        b, c, h, w = feats.shape
        flat = ad.reshape(feats, (b, c, h * w))
        attended = region_word_attention_batch(words, flat, self.word_proj, mask)
        attended = ad.reshape(attended, (b, c, h, w))
        x = ad.concat([feats, attended], axis=1)
        return self.up(self.res2(self.res1(x)))


class ToImage(Module):
    def __init__(self, rng, d_feat):
        super().__init__()
        self.conv = self.add_child("conv", Conv2d(rng, d_feat, 3, 3, pad=1))

    def __call__(self, x):
        return ad.tanh(self.conv(x))


class ImageReconstructor(Module):
    """g(text, noise): the full stacked generator plus conditioning augmentation."""

    def __init__(self, rng, *, d_words, d_feat, d_noise, d_cond, base_out_side=16,
                 stages=2):
        super().__init__()
        if stages < 1:
            raise ValueError("need at least one stage")
        self.d_noise = d_noise
        self.stages = stages
        self.sides = [base_out_side * (1 << i) for i in range(stages)]
        self.augment = self.add_child(
            "augment", ConditioningAugmenter(rng, d_words, d_cond)
        )
        self.stage0 = self.add_child(
            "stage0", StageZero(rng, d_noise, d_cond, d_feat, base_out_side)
        )
        self.refiners = [
            self.add_child(f"refiner{i}", Refiner(rng, d_feat, d_words))
            for i in range(1, stages)
        ]
        self.heads = [
            self.add_child(f"head{i}", ToImage(rng, d_feat)) for i in range(stages)
        ]

    def forward_batch(self, words: Tensor, final: Tensor, mask: np.ndarray,
                      noise: np.ndarray, ca_mode: str = "sample",
                      rng: np.random.Generator | None = None,
                      ca_eta: np.ndarray | None = None):
        """words (B, L, d1) as produced by the text encoder, noise (B, d_noise).

        Returns (list of stage images (B, 3, s, s), info dict).
        """
        h_ca, mu, logvar = self.augment(final, mode=ca_mode, rng=rng, eta=ca_eta)
        words_t = ad.swapaxes(words, 1, 2)  # (B, d1, L)
        feats = self.stage0(Tensor(noise), h_ca)
        images = [self.heads[0](feats)]
        for i, refiner in enumerate(self.refiners, start=1):
            feats = refiner(feats, words_t, mask)
            images.append(self.heads[i](feats))
        return images, {"h_ca": h_ca, "mu": mu, "logvar": logvar}

    def reconstruct_batch(self, encoder: TextEncoder, id_seqs: list[list[int]],
                          noise: np.ndarray, mode: str = "deterministic",
                          rng: np.random.Generator | None = None) -> list[Tensor]:
        """Encode token sequences and generate; no gradients are recorded."""
        ids, lengths, _ = pad_batch(id_seqs)
        with ad.no_grad():
            hidden, final, mask = encoder.encode_batch(ids, lengths)
            ca_mode = "deterministic" if mode == "deterministic" else "sample"
            images, _ = self.forward_batch(hidden, final, mask, noise,
                                           ca_mode=ca_mode, rng=rng)
        return images

    def reconstruct(self, encoder: TextEncoder, token_ids, noise=None,
                    mode: str = "deterministic",
                    rng: np.random.Generator | None = None) -> ImagePyramid:
        """Generate the image pyramid for one token sequence."""
        token_ids = list(token_ids)
        if not token_ids:
            raise ValueError("cannot reconstruct from an empty sequence")
        if noise is None:
            if mode == "deterministic":
                noise = np.zeros(self.d_noise)
            else:
                if rng is None:
                    raise ValueError("sample mode needs an rng or explicit noise")
                noise = rng.standard_normal(self.d_noise)
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != (self.d_noise,):
            raise ValueError(f"noise must have shape ({self.d_noise},)")
        images = self.reconstruct_batch(encoder, [token_ids], noise[None],
                                        mode=mode, rng=rng)
        return ImagePyramid(
            images=[im.data[0].reshape(3, -1).copy() for im in images],
            sides=list(self.sides),
        )


# ---------------------------------------------------------------------------
# discriminators
# ---------------------------------------------------------------------------


class Discriminator(Module):
    """Strided-conv downsampling to a 4x4 grid with two sigmoid heads."""

    COND_DIM = 32

    def __init__(self, rng, side, d_text, base_channels=16, max_channels_mult=8):
        super().__init__()
        if side < 8 or side & (side - 1):
            raise ValueError("discriminator side must be a power of two >= 8")
        self.side = side
        downs = []
        c_in, c_out, s = 3, base_channels, side
        i = 0
        while s > 4:
            downs.append(
                (
                    self.add_child(f"down{i}", Conv2d(rng, c_in, c_out, 4, stride=2, pad=1)),
                    self.add_child(f"down{i}_norm", FeatureNorm2d(c_out)) if i else None,
                )
            )
            c_in = c_out
            c_out = min(c_out * 2, base_channels * max_channels_mult)
            s //= 2
            i += 1
        self.downs = downs
        self.feat_channels = c_in
        self.uncond_head = self.add_child(
            "uncond_head", Conv2d(rng, c_in, 1, 4, stride=1, pad=0)
        )
        self.text_proj = self.add_child("text_proj", Linear(rng, d_text, self.COND_DIM))
        self.cond_mix = self.add_child(
            "cond_mix", Conv2d(rng, c_in + self.COND_DIM, c_in, 3, pad=1)
        )
        self.cond_norm = self.add_child("cond_norm", FeatureNorm2d(c_in))
        self.cond_head = self.add_child(
            "cond_head", Conv2d(rng, c_in, 1, 4, stride=1, pad=0)
        )

    def features(self, images) -> Tensor:
        x = images
        for conv, norm in self.downs:
            x = conv(x)
            if norm is not None:
                x = norm(x)
            x = ad.leaky_relu(x, 0.2)
        return x  # (B, C, 4, 4)

    def _uncond_from(self, feats, batch) -> Tensor:
        return ad.sigmoid(ad.reshape(self.uncond_head(feats), (batch,)))

    def _cond_from(self, feats, final, batch) -> Tensor:
        text = self.text_proj(final)  # (B, 32)
        tiled = ad.reshape(text, (batch, self.COND_DIM, 1, 1)) * np.ones((1, 1, 4, 4))
        x = ad.concat([feats, tiled], axis=1)
        x = ad.leaky_relu(self.cond_norm(self.cond_mix(x)), 0.2)
        return ad.sigmoid(ad.reshape(self.cond_head(x), (batch,)))

    def uncond(self, images) -> Tensor:
        """P(image is real); shape (B,)."""
        return self._uncond_from(self.features(images), images.shape[0])

    def cond(self, images, final) -> Tensor:
        """P(image is real and consistent with the text); shape (B,)."""
        return self._cond_from(self.features(images), final, images.shape[0])

    def both(self, images, final):
        """(uncond, cond) probabilities sharing one feature pass.

        Normalization is per-sample, so this matches separate calls exactly.
        """
        feats = self.features(images)
        b = images.shape[0]
        return self._uncond_from(feats, b), self._cond_from(feats, final, b)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _safe_log(p: Tensor) -> tuple[Tensor, bool]:
    clamped = bool(np.any(p.data <= PROB_EPS) or np.any(p.data >= 1.0 - PROB_EPS))
    return ad.log(ad.clip(p, PROB_EPS, 1.0 - PROB_EPS)), clamped


def generator_loss(disc: Discriminator, fake: Tensor, final: Tensor):
    """-1/2 E[log D(fake)] - 1/2 E[log D(fake, text)].

    Returns (loss, diagnostics); diagnostics flag probability clamping.
    """
    p_u, p_c = disc.both(fake, final)
    log_u, c1 = _safe_log(p_u)
    log_c, c2 = _safe_log(p_c)
    loss = -0.5 * ad.tmean(log_u) - 0.5 * ad.tmean(log_c)
    return loss, {"clamped": c1 or c2}


def discriminator_loss(disc: Discriminator, real: Tensor, fake: Tensor, final: Tensor):
    """Four-term real/fake x unconditional/conditional loss.

    Real and fake batches go through the feature stack as one concatenated
    batch; per-sample normalization keeps that identical to separate passes.
    """
    n_real = real.shape[0]
    joint = ad.concat([real, fake], axis=0)
    final2 = ad.concat([final, final], axis=0)
    p_u, p_c = disc.both(joint, final2)
    log_ru, c1 = _safe_log(p_u[:n_real])
    log_fu, c2 = _safe_log(1.0 - p_u[n_real:])
    log_rc, c3 = _safe_log(p_c[:n_real])
    log_fc, c4 = _safe_log(1.0 - p_c[n_real:])
    loss = (
        -0.5 * ad.tmean(log_ru)
        - 0.5 * ad.tmean(log_fu)
        - 0.5 * ad.tmean(log_rc)
        - 0.5 * ad.tmean(log_fc)
    )
    return loss, {"clamped": c1 or c2 or c3 or c4}


def total_generator_loss(stage_losses, ca_kl=None, lambda_ca: float = 0.0):
    """Sum the per-stage adversarial losses; the CA KL term is kept separate.

    Returns (total, adversarial) where total includes lambda_ca * ca_kl.
    """
    adversarial = stage_losses[0]
    for term in stage_losses[1:]:
        adversarial = adversarial + term
    total = adversarial
    if ca_kl is not None and lambda_ca:
        total = total + lambda_ca * ca_kl
    return total, adversarial


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


def build_discriminators(rng, recon: ImageReconstructor, d_text: int,
                         base_channels: int = 16) -> list[Discriminator]:
    return [
        Discriminator(rng, side, d_text, base_channels=base_channels)
        for side in recon.sides
    ]


def pretrain_reconstructor(recon: ImageReconstructor, discs: list[Discriminator],
                           encoder: TextEncoder, records, vocab, image_root, *,
                           epochs: int, lr: float = 2e-4, batch_size: int = 16,
                           lambda_ca: float = 1.0, seed: int = 0,
                           sample_dir=None, sample_every: int = 0,
                           log=None) -> list[dict]:
    """Alternating D/G training on image-grounded dialogues, then freeze.

    The text fed to the generator is the context and response joined with
    separator tokens.  Real images are area-downscaled to each stage's
    resolution.  Returns per-step loss rows.
    """
    from pathlib import Path

    rng = np.random.Generator(np.random.PCG64(seed))
    records = [r for r in records if r.image_ref is not None]
    if not records:
        raise ValueError("reconstructor pretraining needs image-grounded records")
    image_root = Path(image_root)
    max_len = encoder.max_len

    texts = [vocab.encode(r.joint_text())[:max_len] for r in records]
    # the encoder is frozen, so text features can be computed once
    with ad.no_grad():
        enc_cache = []
        for t in texts:
            hidden, final, _ = encoder.encode_batch(np.array([t]), np.array([len(t)]))
            enc_cache.append((hidden.data[0], final.data[0]))
    pyramids = []
    for r in records:
        img = load_png(image_root / r.image_ref)
        pyramids.append([downscale_area(img, side) for side in recon.sides])

    g_params = recon.params()
    d_params = [p for d in discs for p in d.params()]
    opt_g = Adam(g_params, lr=lr, beta1=0.5)
    opt_d = Adam(d_params, lr=lr, beta1=0.5)

    history = []
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(records))
        for start in range(0, len(records), batch_size):
            idx = order[start : start + batch_size]
            lengths = np.array([len(texts[i]) for i in idx])
            width = int(lengths.max())
            d1 = enc_cache[0][0].shape[1]
            hid = np.zeros((len(idx), width, d1))
            for row, i in enumerate(idx):
                hid[row, : lengths[row]] = enc_cache[i][0]
            mask = np.arange(width)[None, :] < lengths[:, None]
            hidden = Tensor(hid)
            final = Tensor(np.stack([enc_cache[i][1] for i in idx]))
            noise = rng.standard_normal((len(idx), recon.d_noise))
            fakes, info = recon.forward_batch(hidden, final, mask, noise,
                                              ca_mode="sample", rng=rng)

            reals = []
            for si in range(len(recon.sides)):
                batch_imgs = np.stack([pyramids[i][si] for i in idx])
                reals.append(Tensor(batch_imgs))

            d_loss_terms = []
            for disc, real, fake in zip(discs, reals, fakes):
                term, _ = discriminator_loss(disc, real, fake.detach(), final)
                d_loss_terms.append(term)
            d_loss = d_loss_terms[0]
            for term in d_loss_terms[1:]:
                d_loss = d_loss + term
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()

            g_terms = []
            for disc, fake in zip(discs, fakes):
                term, _ = generator_loss(disc, fake, final)
                g_terms.append(term)
            ca_kl = recon.augment.kl_to_standard_normal(final)
            g_total, g_adv = total_generator_loss(g_terms, ca_kl, lambda_ca)
            opt_g.zero_grad()
            opt_d.zero_grad()  # gradient flowed through D on the G step
            g_total.backward()
            opt_g.step()

            row = {
                "step": step,
                "epoch": epoch,
                "d_loss": float(d_loss.item()),
                "g_loss": float(g_adv.item()),
                "g_total": float(g_total.item()),
                "ca_kl": float(ca_kl.item()),
            }
            history.append(row)
            if log is not None:
                log(row)
            if sample_dir is not None and sample_every and step % sample_every == 0:
                _write_sample_grid(Path(sample_dir), epoch, step, fakes[-1].data)
            step += 1

    recon.freeze()
    for d in discs:
        d.freeze()
    return history


def _write_sample_grid(sample_dir, epoch: int, step: int, images: np.ndarray,
                       max_images: int = 8):
    sample_dir.mkdir(parents=True, exist_ok=True)
    picks = images[:max_images]
    grid = np.concatenate(list(picks), axis=2)  # side by side
    save_png(grid, sample_dir / f"samples_epoch{epoch:03d}_step{step:06d}.png")
