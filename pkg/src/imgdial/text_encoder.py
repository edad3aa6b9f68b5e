"""Shared bidirectional GRU text encoder.

One encoder instance produces both the per-token feature matrix consumed by
the image side's word attention and the context features/initial state used
by the response decoder.  It is pretrained as the encoder half of a plain
seq2seq model and then frozen; everything downstream treats its outputs as
fixed functions of the input tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Adam, Embedding, GRUCell, Linear, Module, clip_global_norm, dot_attention


@dataclass
class TextFeatures:
    """Per-token hidden matrix (d1 x L) plus the final column."""

    hidden: np.ndarray
    final: np.ndarray
    length: int


@dataclass
class ConditioningVector:
    h_ca: np.ndarray
    mu: np.ndarray
    logvar: np.ndarray


def pad_batch(sequences: list[list[int]], pad_id: int = 0):
    """Right-pad id sequences; returns (ids (B,L), lengths (B,), mask (B,L))."""
    if not sequences:
        raise ValueError("empty batch")
    lengths = np.array([len(s) for s in sequences], dtype=np.int64)
    if lengths.min() == 0:
        raise ValueError("empty sequence in batch")
    max_len = int(lengths.max())
    ids = np.full((len(sequences), max_len), pad_id, dtype=np.int64)
    for i, s in enumerate(sequences):
        ids[i, : len(s)] = s
    mask = np.arange(max_len)[None, :] < lengths[:, None]
    return ids, lengths, mask


class TextEncoder(Module):
    """Embedding + forward/backward GRUs; features are the concatenation of
    directions, so the model width must be even.

    Both directions are stacked in processing order: position i holds the
    forward state over tokens 1..i and the backward state over tokens
    L..L-i+1.  The last column therefore concatenates both full-sequence
    summaries, which is what conditioning and decoder initialization consume.
    """

    def __init__(self, rng, vocab_size: int, d_model: int, d_embed: int,
                 max_len: int = 64):
        super().__init__()
        if d_model % 2:
            raise ValueError("d_model must be even (two directions are concatenated)")
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.d_half = d_model // 2
        self.max_len = max_len
        self.embedding = self.add_child("embedding", Embedding(rng, vocab_size, d_embed))
        self.fwd = self.add_child("fwd", GRUCell(rng, d_embed, self.d_half))
        self.bwd = self.add_child("bwd", GRUCell(rng, d_embed, self.d_half))

    # -- batched graph-building core -----------------------------------------

    def _scan(self, cell: GRUCell, emb: Tensor, mask: np.ndarray) -> Tensor:
        """Run `cell` over time axis 1 with per-position update masking."""
        batch, steps = mask.shape
        h = Tensor(np.zeros((batch, self.d_half)))
        states = []
        for t in range(steps):
            h_new = cell(emb[:, t, :], h)
            m = mask[:, t : t + 1].astype(np.float64)
            h = h_new * m + h * (1.0 - m)
            states.append(h)
        return ad.stack(states, axis=1)  # (B, steps, d_half)

    def encode_batch(self, ids: np.ndarray, lengths: np.ndarray):
        """Returns (hidden (B, L, d1), final (B, d1), mask (B, L))."""
        ids = np.asarray(ids, dtype=np.int64)
        lengths = np.asarray(lengths, dtype=np.int64)
        batch, max_len = ids.shape
        if max_len == 0 or lengths.min() < 1:
            raise ValueError("sequences must have length >= 1")
        if max_len > self.max_len:
            raise ValueError(f"sequence length {max_len} exceeds max_len {self.max_len}")
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise ValueError("token id out of range")
        mask = np.arange(max_len)[None, :] < lengths[:, None]

        emb = self.embedding(ids)  # (B, L, d_embed)
        fwd_states = self._scan(self.fwd, emb, mask)

        # feed each sequence reversed inside its own length; states stay in
        # processing order, so slot i is the backward state over the last i+1
        # tokens
        rows = np.arange(batch)[:, None]
        rev_idx = lengths[:, None] - 1 - np.arange(max_len)[None, :]
        rev_idx = np.clip(rev_idx, 0, max_len - 1)
        emb_rev = emb[rows, rev_idx, :]
        bwd_states = self._scan(self.bwd, emb_rev, mask)

        hidden = ad.concat([fwd_states, bwd_states], axis=2)  # (B, L, d1)
        final = hidden[rows[:, 0], lengths - 1, :]  # (B, d1)
        return hidden, final, mask

    # -- public single-sequence API -------------------------------------------

    def encode_text(self, token_ids) -> TextFeatures:
        """Encode one id sequence to a (d1, L) feature matrix."""
        token_ids = list(token_ids)
        if not token_ids:
            raise ValueError("cannot encode an empty sequence")
        with ad.no_grad():
            hidden, final, _ = self.encode_batch(
                np.array([token_ids]), np.array([len(token_ids)])
            )
        return TextFeatures(
            hidden=hidden.data[0].T.copy(),
            final=final.data[0].copy(),
            length=len(token_ids),
        )


class ConditioningAugmenter(Module):
    """Gaussian conditioning vector: mu and logvar are affine in the input."""

    def __init__(self, rng, d_in: int, d_out: int):
        super().__init__()
        self.d_out = d_out
        self.proj = self.add_child("proj", Linear(rng, d_in, 2 * d_out))

    def moments(self, final) -> tuple[Tensor, Tensor]:
        y = self.proj(final)
        return y[..., : self.d_out], y[..., self.d_out :]

    def __call__(self, final, mode: str = "sample",
                 rng: np.random.Generator | None = None,
                 eta: np.ndarray | None = None):
        """Returns (h_ca, mu, logvar); `mode` is "sample" or "deterministic"."""
        mu, logvar = self.moments(final)
        if mode == "deterministic":
            return mu, mu, logvar
        if eta is None:
            if rng is None:
                raise ValueError("sample mode needs an rng or explicit eta")
            eta = rng.standard_normal(mu.shape)
        h_ca = mu + ad.exp(0.5 * logvar) * eta
        return h_ca, mu, logvar

    def kl_to_standard_normal(self, final) -> Tensor:
        """Mean KL(N(mu, diag exp(logvar)) || N(0, I)) over the batch."""
        mu, logvar = self.moments(final)
        per = 0.5 * ad.tsum(mu * mu + ad.exp(logvar) - 1.0 - logvar, axis=-1)
        return ad.tmean(per)


def condition_augment(augmenter: ConditioningAugmenter, final: np.ndarray,
                      mode: str = "sample",
                      rng: np.random.Generator | None = None) -> ConditioningVector:
    """Single-vector convenience wrapper around the augmenter."""
    with ad.no_grad():
        h_ca, mu, logvar = augmenter(Tensor(final[None, :]), mode=mode, rng=rng)
    return ConditioningVector(h_ca.data[0], mu.data[0], logvar.data[0])


# ---------------------------------------------------------------------------
# seq2seq pretraining
# ---------------------------------------------------------------------------


class Seq2SeqDecoder(Module):
    """Throwaway attentive decoder used only to pretrain the encoder.

    Its embedding table is shared with the encoder so that tokens appearing
    mostly on the response side still end up with trained encoder embeddings,
    and dot-product attention over the encoder states puts training pressure
    on every column, not just the final one.
    """

    def __init__(self, rng, encoder: TextEncoder, d_model: int, d_embed: int):
        super().__init__()
        self.embedding = encoder.embedding  # shared, not re-registered
        self.cell = self.add_child("cell", GRUCell(rng, d_embed, d_model))
        self.out = self.add_child("out", Linear(rng, 2 * d_model, encoder.vocab_size))


def seq2seq_loss(encoder: TextEncoder, decoder: Seq2SeqDecoder, src: list[list[int]],
                 tgt: list[list[int]], bos_id: int, eos_id: int) -> tuple[Tensor, int]:
    """Teacher-forced mean NLL per token; targets get a trailing <eos>."""
    src_ids, src_lens, _ = pad_batch(src)
    hidden, final, src_mask = encoder.encode_batch(src_ids, src_lens)

    tgt_full = [list(t) + [eos_id] for t in tgt]
    tgt_ids, tgt_lens, tgt_mask = pad_batch(tgt_full)
    batch, steps = tgt_ids.shape
    inputs = np.concatenate(
        [np.full((batch, 1), bos_id, dtype=np.int64), tgt_ids[:, :-1]], axis=1
    )

    h = final
    total = Tensor(np.zeros(()))
    n_tokens = int(tgt_lens.sum())
    for t in range(steps):
        emb_t = decoder.embedding(inputs[:, t])
        h_new = decoder.cell(emb_t, h)
        m = tgt_mask[:, t : t + 1].astype(np.float64)
        h = h_new * m + h * (1.0 - m)
        ctx, _ = dot_attention(h, hidden, src_mask)
        logp = ad.log_softmax(decoder.out(ad.concat([h, ctx], axis=-1)), axis=-1)
        picked = logp[np.arange(batch), tgt_ids[:, t]]
        total = total + ad.tsum(-picked * m[:, 0])
    return total / float(n_tokens), n_tokens


def pretrain_text_encoder(encoder: TextEncoder, dialogues, epochs: int, *,
                          vocab, lr: float = 1e-3, batch_size: int = 32,
                          seed: int = 0, grad_clip: float = 5.0,
                          log=None) -> list[float]:
    """Train encoder+decoder on context -> response, then freeze the encoder.

    Returns per-epoch mean losses.  With epochs=0 the encoder is frozen
    untouched.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    decoder = Seq2SeqDecoder(rng, encoder, encoder.d_model,
                             encoder.embedding.table.shape[1])
    pairs = [
        (vocab.encode(d.flat_context())[: encoder.max_len],
         vocab.encode(list(d.response))[: encoder.max_len - 1])
        for d in dialogues
    ]
    if not pairs:
        raise ValueError("no dialogues to pretrain on")
    opt = Adam(encoder.params() + decoder.params(), lr=lr)
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(pairs))
        epoch_loss, n_batches = 0.0, 0
        for start in range(0, len(pairs), batch_size):
            chunk = [pairs[i] for i in order[start : start + batch_size]]
            src = [c[0] for c in chunk]
            tgt = [c[1] for c in chunk]
            loss, _ = seq2seq_loss(encoder, decoder, src, tgt,
                                   vocab.bos_id, vocab.eos_id)
            opt.zero_grad()
            loss.backward()
            clip_global_norm(opt.params, grad_clip)
            opt.step()
            epoch_loss += loss.item()
            n_batches += 1
        history.append(epoch_loss / n_batches)
        if log is not None:
            log(len(history), history[-1])
    encoder.freeze()
    return history
