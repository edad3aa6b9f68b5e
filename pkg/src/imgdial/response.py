"""Gated multimodal response generation.

A GRU decoder starts from the context encoder's final state and, at every
step, attends separately over context token features and image sub-region
features.  A scalar gate mixes the image context into the text context before
the output projection, so the decoder can ignore noisy or irrelevant visual
input word by word.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import (Adam, Conv2d, Embedding, GRUCell, FeatureNorm2d, Linear,
                 Module, clip_global_norm, xavier_init)
from .text_encoder import TextEncoder, pad_batch


# ---------------------------------------------------------------------------
# image backbone (frozen feature extractor standing in for a large CNN)
# ---------------------------------------------------------------------------


class ImageBackbone(Module):
    """Four conv blocks; two stride-2 stages give a (side/4)^2 region grid."""

    def __init__(self, rng, d_out: int, base_channels: int = 16):
        super().__init__()
        c = base_channels
        self.d_out = d_out
        self.conv1 = self.add_child("conv1", Conv2d(rng, 3, c, 4, stride=2, pad=1))
        self.conv2 = self.add_child("conv2", Conv2d(rng, c, 2 * c, 4, stride=2, pad=1))
        self.norm2 = self.add_child("norm2", FeatureNorm2d(2 * c))
        self.conv3 = self.add_child("conv3", Conv2d(rng, 2 * c, 2 * c, 3, pad=1))
        self.norm3 = self.add_child("norm3", FeatureNorm2d(2 * c))
        self.conv4 = self.add_child("conv4", Conv2d(rng, 2 * c, d_out, 3, pad=1))

    def __call__(self, images) -> Tensor:
        """(B, 3, side, side) -> raw region features (B, d_out, side/4, side/4)."""
        x = ad.leaky_relu(self.conv1(images), 0.2)
        x = ad.leaky_relu(self.norm2(self.conv2(x)), 0.2)
        x = ad.leaky_relu(self.norm3(self.conv3(x)), 0.2)
        return self.conv4(x)


class BackboneClassifier(Module):
    """Shape/color heads used only to pretrain the backbone."""

    def __init__(self, rng, backbone: ImageBackbone, n_shapes: int, n_colors: int):
        super().__init__()
        self.backbone = self.add_child("backbone", backbone)
        self.shape_head = self.add_child("shape_head", Linear(rng, backbone.d_out, n_shapes))
        self.color_head = self.add_child("color_head", Linear(rng, backbone.d_out, n_colors))

    def logits(self, images):
        pooled = ad.tmean(self.backbone(images), axis=(2, 3))
        return self.shape_head(pooled), self.color_head(pooled)


def pretrain_backbone(backbone: ImageBackbone, records, image_root, *,
                      epochs: int, lr: float = 1e-3, batch_size: int = 32,
                      seed: int = 0, log=None) -> list[float]:
    """Brief shape/color classification training, then freeze.

    Labels are read off the response text, which by construction names the
    scene's shape and color.
    """
    from pathlib import Path

    from .data import COLORS, SHAPES, load_png

    rng = np.random.Generator(np.random.PCG64(seed))
    image_root = Path(image_root)
    entries = []
    for rec in records:
        if rec.image_ref is None:
            continue
        toks = set(rec.response)
        shape = next((i for i, s in enumerate(SHAPES) if s in toks), None)
        color = next((i for i, c in enumerate(COLORS) if c in toks), None)
        if shape is None or color is None:
            continue
        entries.append((load_png(image_root / rec.image_ref), shape, color))
    if not entries:
        raise ValueError("no labelled image records for backbone pretraining")

    clf = BackboneClassifier(rng, backbone, len(SHAPES), len(COLORS))
    opt = Adam(clf.params(), lr=lr)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(entries))
        total, batches = 0.0, 0
        for start in range(0, len(entries), batch_size):
            idx = order[start : start + batch_size]
            images = np.stack([entries[i][0] for i in idx])
            shapes = np.array([entries[i][1] for i in idx])
            colors = np.array([entries[i][2] for i in idx])
            s_logits, c_logits = clf.logits(Tensor(images))
            rows = np.arange(len(idx))
            loss = -ad.tmean(ad.log_softmax(s_logits, axis=-1)[rows, shapes]) \
                   - ad.tmean(ad.log_softmax(c_logits, axis=-1)[rows, colors])
            opt.zero_grad()
            loss.backward()
            clip_global_norm(opt.params, 5.0)
            opt.step()
            total += loss.item()
            batches += 1
        history.append(total / batches)
        if log is not None:
            log(epoch + 1, history[-1])
    backbone.freeze()
    return history


# ---------------------------------------------------------------------------
# region features and attention
# ---------------------------------------------------------------------------


@dataclass
class RegionFeatures:
    """Projected (d1 x N) and raw (d3 x N) sub-region features."""

    projected: np.ndarray
    raw: np.ndarray
    grid: int


def attention_context_batch(h: Tensor, items: Tensor,
                            mask: np.ndarray | None = None):
    """h (B, d1), items (B, K, d1) -> (context (B, d1), weights (B, K)).

    Scores are plain dot products between the decoder state and each item.
    """
    scores = ad.matmul(items, ad.reshape(h, (h.shape[0], h.shape[1], 1)))
    scores = ad.reshape(scores, (h.shape[0], items.shape[1]))  # (B, K)
    weights = ad.softmax(scores, axis=-1, mask=mask)
    ctx = ad.matmul(ad.reshape(weights, (h.shape[0], 1, items.shape[1])), items)
    return ad.reshape(ctx, (h.shape[0], h.shape[1])), weights


def attention_context(h: np.ndarray, items: np.ndarray):
    """Single-step form: h (d1,), items (d1, K) -> (context (d1,), weights (K,))."""
    if items.ndim != 2 or h.ndim != 1 or items.shape[0] != h.shape[0]:
        raise ValueError(f"shape mismatch: h {h.shape}, items {items.shape}")
    if items.shape[1] == 0:
        raise ValueError("attention over zero items")
    with ad.no_grad():
        ctx, w = attention_context_batch(Tensor(h[None]), Tensor(items.T[None]))
    return ctx.data[0], w.data[0]


def fuse_gate(h: np.ndarray, ctx_text: np.ndarray, ctx_image: np.ndarray,
              gate_weight: np.ndarray, gate_enabled: bool = True):
    """Scalar gate g = sigmoid(W [h; ctx_text; ctx_image]); fused = text + g*image.

    With the gate disabled, g is pinned to 1 and the fusion is a plain sum.
    """
    if not gate_enabled:
        return ctx_text + ctx_image, 1.0
    x = np.concatenate([h, ctx_text, ctx_image])
    g = float(1.0 / (1.0 + np.exp(-float(gate_weight.reshape(-1) @ x))))
    return ctx_text + g * ctx_image, g


# ---------------------------------------------------------------------------
# decode traces
# ---------------------------------------------------------------------------


@dataclass
class TraceStep:
    token_id: int
    log_prob: float
    gate: float
    state: np.ndarray
    attn_context: np.ndarray
    attn_image: np.ndarray


@dataclass
class DecodeTrace:
    steps: list[TraceStep] = field(default_factory=list)

    @property
    def tokens(self) -> list[int]:
        return [s.token_id for s in self.steps]

    @property
    def gates(self) -> list[float]:
        return [s.gate for s in self.steps]

    @property
    def total_log_prob(self) -> float:
        total = 0.0
        for s in self.steps:
            total += s.log_prob
        return total


# ---------------------------------------------------------------------------
# the generator itself
# ---------------------------------------------------------------------------


class ResponseGenerator(Module):
    """P(response | image-or-latent, context) with gated visual fusion.

    The text encoder and image backbone are frozen collaborators, not owned
    parameters; only decoder-side weights live in this module.
    """

    def __init__(self, rng, *, vocab_size: int, d_model: int, d_embed: int,
                 d_image_raw: int, encoder: TextEncoder, backbone: ImageBackbone,
                 gate_enabled: bool = True):
        super().__init__()
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.encoder = encoder
        self.backbone = backbone
        self.gate_enabled = gate_enabled
        self.embedding = self.add_child("embedding", Embedding(rng, vocab_size, d_embed))
        self.cell = self.add_child("cell", GRUCell(rng, d_embed, d_model))
        self.region_proj = self.add_param(
            "region_proj", xavier_init(rng, d_image_raw, d_model, (d_model, d_image_raw))
        )
        self.out = self.add_child("out", Linear(rng, 2 * d_model, vocab_size))
        self.gate_w = self.add_param("gate_w", np.zeros((1, 3 * d_model)))

    # -- image encoding --------------------------------------------------------

    def region_features_batch(self, images) -> Tensor:
        """(B, 3, side, side) -> projected region features (B, N, d1)."""
        raw = self.backbone(images)  # (B, d3, n, n)
        b, d3, n, _ = raw.shape
        flat = ad.reshape(raw, (b, d3, n * n))
        proj = ad.matmul(self.region_proj, flat)  # (B, d1, N)
        return ad.swapaxes(proj, 1, 2)

    def encode_image(self, image: np.ndarray) -> RegionFeatures:
        """Encode one (3, side, side) image in [-1, 1] to region features."""
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[0] != 3 or image.shape[1] != image.shape[2]:
            raise ValueError(f"expected a square (3, side, side) image, got {image.shape}")
        if image.shape[1] < 16:
            raise ValueError("image side must be >= 16")
        if np.max(np.abs(image)) > 1.0 + 1e-9:
            raise ValueError("pixel values must lie in [-1, 1]")
        with ad.no_grad():
            raw = self.backbone(Tensor(image[None]))
            b, d3, n, _ = raw.shape
            flat = ad.reshape(raw, (b, d3, n * n))
            proj = ad.matmul(self.region_proj, flat)
        return RegionFeatures(projected=proj.data[0], raw=flat.data[0], grid=n)

    # -- core batched teacher-forced pass --------------------------------------

    def _gate_batch(self, h: Tensor, ctx_text: Tensor, ctx_image: Tensor):
        if not self.gate_enabled:
            b = h.shape[0]
            return ctx_text + ctx_image, Tensor(np.ones((b, 1)))
        x = ad.concat([h, ctx_text, ctx_image], axis=-1)
        g = ad.sigmoid(ad.matmul(x, ad.swapaxes(self.gate_w, 0, 1)))  # (B, 1)
        return ctx_text + g * ctx_image, g

    def nll_batch(self, contexts: list[list[int]], responses: list[list[int]],
                  images: np.ndarray, bos_id: int, eos_id: int):
        """Teacher-forced negative log-likelihood.

        contexts/responses are id sequences (no <bos>/<eos>); a trailing
        <eos> is appended to each response.  Returns (per-example NLL sums
        as a (B,) Tensor, token counts as a (B,) int array).
        """
        ctx_ids, ctx_lens, _ = pad_batch(contexts)
        hidden, final, ctx_mask = self.encoder.encode_batch(ctx_ids, ctx_lens)
        items_text = hidden  # (B, L, d1)
        items_image = self.region_features_batch(images)

        tgt_full = [list(r) + [eos_id] for r in responses]
        tgt_ids, tgt_lens, tgt_mask = pad_batch(tgt_full)
        batch, steps = tgt_ids.shape
        inputs = np.concatenate(
            [np.full((batch, 1), bos_id, dtype=np.int64), tgt_ids[:, :-1]], axis=1
        )

        h = final
        nll = Tensor(np.zeros(batch))
        rows = np.arange(batch)
        for t in range(steps):
            emb_t = self.embedding(inputs[:, t])
            h_new = self.cell(emb_t, h)
            m = tgt_mask[:, t : t + 1].astype(np.float64)
            h = h_new * m + h * (1.0 - m)
            ctx_t, _ = attention_context_batch(h, items_text, ctx_mask)
            ctx_i, _ = attention_context_batch(h, items_image)
            fused, _ = self._gate_batch(h, ctx_t, ctx_i)
            logits = self.out(ad.concat([h, fused], axis=-1))
            logp = ad.log_softmax(logits, axis=-1)
            nll = nll + (-logp[rows, tgt_ids[:, t]]) * m[:, 0]
        return nll, tgt_lens.copy()

    # -- single-example API -----------------------------------------------------

    def _prepare(self, context_ids: list[int], image: np.ndarray):
        ids = np.array([context_ids])
        lens = np.array([len(context_ids)])
        hidden, final, _ = self.encoder.encode_batch(ids, lens)
        items_text = hidden.data[0]  # (L, d1)
        feats = self.encode_image(image)
        items_image = feats.projected.T  # (N, d1)
        return items_text, items_image, final.data[0]

    def decode_step(self, h_prev: np.ndarray, y_prev: int, items_text: np.ndarray,
                    items_image: np.ndarray):
        """One decoder step; returns (h_t, probability vector, step info).

        `items_text`/`items_image` are (K, d1) row-per-item matrices.
        """
        if not 0 <= y_prev < self.vocab_size:
            raise ValueError(f"token id {y_prev} out of range")
        with ad.no_grad():
            emb = self.embedding(np.array([y_prev]))
            h = self.cell(emb, Tensor(h_prev[None]))
            ctx_t, w_t = attention_context_batch(h, Tensor(items_text[None]))
            ctx_i, w_i = attention_context_batch(h, Tensor(items_image[None]))
            fused, g = self._gate_batch(h, ctx_t, ctx_i)
            logits = self.out(ad.concat([h, fused], axis=-1))
            logp = ad.log_softmax(logits, axis=-1)
        info = {
            "state": h.data[0].copy(),
            "attn_context": w_t.data[0].copy(),
            "attn_image": w_i.data[0].copy(),
            "gate": float(g.data[0, 0]),
            "log_probs": logp.data[0].copy(),
        }
        return h.data[0].copy(), np.exp(logp.data[0]), info

    def sequence_log_prob(self, context_ids: list[int], response_ids: list[int],
                          image: np.ndarray, bos_id: int, eos_id: int | None,
                          want_trace: bool = False):
        """Teacher-forced log P(response | image, context).

        A trailing <eos> is appended unless eos_id is None.  The reported
        total is the per-step log-probs accumulated in step order, and the
        optional trace carries exactly those per-step values.
        """
        targets = list(response_ids) + ([eos_id] if eos_id is not None else [])
        if not targets:
            raise ValueError("empty response")
        items_text, items_image, h = self._prepare(context_ids, image)
        trace = DecodeTrace()
        total = 0.0
        prev = bos_id
        for tgt in targets:
            h, _, info = self.decode_step(h, prev, items_text, items_image)
            lp = float(info["log_probs"][tgt])
            total += lp
            trace.steps.append(TraceStep(
                token_id=tgt, log_prob=lp, gate=info["gate"], state=info["state"],
                attn_context=info["attn_context"], attn_image=info["attn_image"],
            ))
            prev = tgt
        return (total, trace) if want_trace else total

    def generate_response(self, context_ids: list[int], image: np.ndarray, *,
                          bos_id: int, eos_id: int, strategy: str = "greedy",
                          beam_width: int = 1, max_len: int = 32):
        """Decode a response; returns (token ids without <eos>, DecodeTrace).

        Greedy takes the argmax each step (ties resolve to the lowest token
        id).  Beam search ranks complete hypotheses by total log-probability
        with the same tie-breaking, and beam(1) coincides with greedy.
        """
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        if strategy == "greedy":
            beam_width = 1
        elif strategy != "beam":
            raise ValueError(f"unknown strategy: {strategy}")
        items_text, items_image, h0 = self._prepare(context_ids, image)

        # hypothesis: (tokens, total_logprob, state, prev token, trace, done)
        beams = [([], 0.0, h0, bos_id, DecodeTrace(), False)]
        for _ in range(max_len):
            candidates = []
            for tokens, score, h, prev, trace, done in beams:
                if done:
                    candidates.append((tokens, score, h, prev, trace, True))
                    continue
                h_new, _, info = self.decode_step(h, prev, items_text, items_image)
                logp = info["log_probs"]
                top = np.argsort(-logp, kind="stable")[: beam_width]
                for tok in top:
                    tok = int(tok)
                    step = TraceStep(
                        token_id=tok, log_prob=float(logp[tok]), gate=info["gate"],
                        state=info["state"], attn_context=info["attn_context"],
                        attn_image=info["attn_image"],
                    )
                    new_trace = DecodeTrace(steps=trace.steps + [step])
                    candidates.append(
                        (tokens + [tok], score + float(logp[tok]), h_new, tok,
                         new_trace, tok == eos_id)
                    )
            candidates.sort(key=lambda c: (-c[1], c[0]))
            beams = candidates[:beam_width]
            if all(c[5] for c in beams):
                break
        tokens, _, _, _, trace, _ = beams[0]
        if tokens and tokens[-1] == eos_id:
            tokens = tokens[:-1]
        return tokens, trace
