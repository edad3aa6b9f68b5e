"""Corpus plumbing: vocabulary, preprocessing, dataset files, and the
procedurally generated shape/color micro-world used for training and tests.

Dataset files are UTF-8 JSON lines::

    {"context": ["utterance", ...], "response": "...", "image": "path-or-null"}

Images are 8-bit RGB PNGs.  The vocabulary file holds one token per line;
the 0-based line index is the token id.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

PAD, BOS, EOS, UNK, SEP = "<pad>", "<bos>", "<eos>", "<unk>", "<sep>"
SPECIALS = (PAD, BOS, EOS, UNK, SEP)

_TOKEN_RE = re.compile(r"[a-z0-9']+|[^\sa-z0-9']")

# sentinel returned by preprocess() for records that fail the filtering rules
REJECTED = object()


def tokenize(text: str) -> list[str]:
    """Lowercase, detach punctuation, split on whitespace."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Dialogue:
    """One training/eval record: context utterances, response, optional image."""

    context: tuple[tuple[str, ...], ...]
    response: tuple[str, ...]
    image_ref: str | None = None

    @staticmethod
    def make(context: list[list[str]], response: list[str], image_ref=None) -> "Dialogue":
        return Dialogue(
            context=tuple(tuple(u) for u in context),
            response=tuple(response),
            image_ref=image_ref,
        )

    def flat_context(self, sep: str = SEP) -> list[str]:
        """Utterances joined with <sep> boundaries."""
        out: list[str] = []
        for i, utt in enumerate(self.context):
            if i:
                out.append(sep)
            out.extend(utt)
        return out

    def joint_text(self, sep: str = SEP) -> list[str]:
        """Context and response concatenated (with a <sep> between them)."""
        return self.flat_context(sep) + [sep] + list(self.response)


class Vocabulary:
    """Token table with the five specials pinned at ids 0..4."""

    def __init__(self, tokens: list[str]):
        if tuple(tokens[:5]) != SPECIALS:
            raise ValueError("vocabulary must start with the five special tokens")
        self.tokens = list(tokens)
        self.id_of = {t: i for i, t in enumerate(self.tokens)}
        if len(self.id_of) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.tokens)

    @property
    def pad_id(self):
        return 0

    @property
    def bos_id(self):
        return 1

    @property
    def eos_id(self):
        return 2

    @property
    def unk_id(self):
        return 3

    @property
    def sep_id(self):
        return 4

    def encode(self, tokens) -> list[int]:
        unk = self.unk_id
        return [self.id_of.get(t, unk) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path):
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @staticmethod
    def load(path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return Vocabulary([ln for ln in lines])


def build_vocab(corpora, max_size: int) -> Vocabulary:
    """Keep the most frequent tokens; ties broken lexicographically.

    `corpora` is an iterable of token sequences.  The five specials occupy
    ids 0..4 and count against `max_size`.
    """
    if max_size < 5:
        raise ValueError("max_size too small")
    counts = Counter()
    for seq in corpora:
        counts.update(seq)
    for special in SPECIALS:
        counts.pop(special, None)
    if not counts:
        raise ValueError("empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [tok for tok, _ in ranked[: max_size - 5]]
    return Vocabulary(list(SPECIALS) + kept)


def preprocess(record: Dialogue, vocab: Vocabulary):
    """Map OOV tokens to <unk>; reject noisy or too-short responses.

    Rejected iff strictly more than 50% of response tokens are <unk> after
    replacement, or the response is shorter than 4 tokens.  Returns the
    cleaned Dialogue or the REJECTED sentinel.
    """
    known = vocab.id_of

    def clean(tokens):
        return tuple(t if t in known else UNK for t in tokens)

    response = clean(record.response)
    if len(response) < 4:
        return REJECTED
    n_unk = sum(1 for t in response if t == UNK)
    if 2 * n_unk > len(response):
        return REJECTED
    context = tuple(clean(u) for u in record.context)
    return replace(record, context=context, response=response)


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------


def save_dataset(records, path):
    records = list(records)
    if not records:
        raise ValueError("refusing to save an empty dataset")
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            obj = {
                "context": [" ".join(u) for u in rec.context],
                "response": " ".join(rec.response),
                "image": rec.image_ref,
            }
            f.write(json.dumps(obj, sort_keys=True) + "\n")


def load_dataset(path) -> list[Dialogue]:
    path = Path(path)
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                context = [tokenize(u) for u in obj["context"]]
                response = tokenize(obj["response"])
                image_ref = obj.get("image")
            except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as e:
                raise ValueError(f"{path}: malformed record at line {lineno}: {e}") from e
            records.append(Dialogue.make(context, response, image_ref))
    return records


# ---------------------------------------------------------------------------
# image helpers ([-1, 1] float <-> 8-bit PNG)
# ---------------------------------------------------------------------------


def image_to_unit(arr_u8: np.ndarray) -> np.ndarray:
    """uint8 (H, W, 3) -> float64 (3, H, W) in [-1, 1]."""
    x = arr_u8.astype(np.float64) / 127.5 - 1.0
    return np.transpose(x, (2, 0, 1))


def unit_to_u8(img: np.ndarray) -> np.ndarray:
    """float (3, H, W) in [-1, 1] -> uint8 (H, W, 3)."""
    x = np.clip((np.transpose(img, (1, 2, 0)) + 1.0) * 127.5, 0.0, 255.0)
    return np.round(x).astype(np.uint8)


def save_png(img: np.ndarray, path):
    Image.fromarray(unit_to_u8(img), mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return image_to_unit(arr)


def downscale_area(img: np.ndarray, side: int) -> np.ndarray:
    """Area-average a (3, H, H) image down to (3, side, side); H % side == 0."""
    c, h, w = img.shape
    if h == side and w == side:
        return img
    if h % side or w % side:
        raise ValueError(f"cannot area-downscale {h}x{w} to {side}x{side}")
    fh, fw = h // side, w // side
    return img.reshape(c, side, fh, side, fw).mean(axis=(2, 4))


# ---------------------------------------------------------------------------
# micro-world
# ---------------------------------------------------------------------------

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
COLOR_RGB = {
    "red": (220, 40, 40),
    "green": (40, 200, 40),
    "blue": (40, 60, 220),
    "yellow": (230, 220, 40),
}
BACKGROUND_RGB = (128, 128, 128)
ROW_WORDS = ("top", "middle", "bottom")
COL_WORDS = ("left", "center", "right")


@dataclass(frozen=True)
class MicroWorldScene:
    shape: str
    color: str
    position: tuple[int, int]  # (row, col) on a 3x3 grid
    image_side: int = 32


_CONTEXT_OPENERS = (
    "what do you see in this picture ?",
    "can you describe the image for me ?",
    "tell me what the photo shows .",
    "i wonder what appears in this frame .",
)
# half of the follow-ups hint at a true scene attribute, so context text is
# sometimes predictive of the response the way real corpora are; hints sit
# at the utterance end where a recurrent summary state keeps them fresh
_CONTEXT_FOLLOWUPS = (
    "look closely and tell me please",
    "i am curious about the scene",
    "take your time with the details",
    "give me your best description",
    "i think i can spot something {color}",
    "if i squint it could be a {shape}",
    "my friend guessed the {row} {col} corner",
    "someone told me it looks {color}",
)
_RESPONSE_TEMPLATES = (
    "in the {row} {col} area there is a {shape} that is {color}",
    "the {row} {col} spot shows a {shape} colored {color}",
    "near the {row} {col} part i see a {shape} painted {color}",
    "looking at the {row} {col} region you can find a {shape} in {color}",
)


def sample_scene(rng: np.random.Generator, image_side: int) -> MicroWorldScene:
    return MicroWorldScene(
        shape=SHAPES[rng.integers(len(SHAPES))],
        color=COLORS[rng.integers(len(COLORS))],
        position=(int(rng.integers(3)), int(rng.integers(3))),
        image_side=image_side,
    )


def scene_dialogue(scene: MicroWorldScene, rng: np.random.Generator) -> Dialogue:
    """Two context utterances plus a response naming the shape and color."""
    fills = {
        "color": scene.color,
        "shape": scene.shape,
        "row": ROW_WORDS[scene.position[0]],
        "col": COL_WORDS[scene.position[1]],
    }
    u1 = _CONTEXT_OPENERS[rng.integers(len(_CONTEXT_OPENERS))]
    u2 = _CONTEXT_FOLLOWUPS[rng.integers(len(_CONTEXT_FOLLOWUPS))].format(**fills)
    response = _RESPONSE_TEMPLATES[rng.integers(len(_RESPONSE_TEMPLATES))].format(**fills)
    return Dialogue.make([tokenize(u1), tokenize(u2)], tokenize(response))


def render_scene(scene: MicroWorldScene) -> np.ndarray:
    """Rasterize to float64 (3, side, side) in [-1, 1]; mid-gray background."""
    side = scene.image_side
    canvas = np.empty((side, side, 3), dtype=np.float64)
    canvas[:] = BACKGROUND_RGB
    cell = side / 3.0
    cy = (scene.position[0] + 0.5) * cell
    cx = (scene.position[1] + 0.5) * cell
    radius = 0.42 * cell
    yy, xx = np.mgrid[0:side, 0:side]
    yc, xc = yy + 0.5, xx + 0.5
    if scene.shape == "circle":
        mask = (yc - cy) ** 2 + (xc - cx) ** 2 <= radius**2
    elif scene.shape == "square":
        mask = (np.abs(yc - cy) <= radius) & (np.abs(xc - cx) <= radius)
    else:  # triangle: apex up, flat base
        base_y = cy + radius
        h = 2.0 * radius
        frac = np.clip((base_y - yc) / h, 0.0, 1.0)  # 1 at apex, 0 at base
        half_width = radius * (1.0 - frac)
        mask = (yc <= base_y) & (yc >= base_y - h) & (np.abs(xc - cx) <= half_width)
    canvas[mask] = COLOR_RGB[scene.color]
    return image_to_unit(np.round(canvas).astype(np.uint8))


def dominant_color(img: np.ndarray) -> str | None:
    """Name the color whose channel pattern dominates the mean over pixels.

    The background is channel-balanced, so channel means are driven by the
    foreground shape.  Returns None when no pattern clearly dominates.
    """
    r, g, b = [float(c) for c in img.reshape(3, -1).mean(axis=1)]
    if r > g and r > b:
        if g > b and (g - b) > 0.5 * (r - b):
            return "yellow"
        return "red"
    if g > r and g > b:
        if r > b and (r - b) > 0.5 * (g - b):
            return "yellow"
        return "green"
    if b > r and b > g:
        return "blue"
    return None


def matches_color_word(img: np.ndarray, color: str) -> bool:
    """Check the channel-dominance pattern implied by a color word."""
    r, g, b = [float(c) for c in img.reshape(3, -1).mean(axis=1)]
    if color == "red":
        return r > g and r > b
    if color == "green":
        return g > r and g > b
    if color == "blue":
        return b > r and b > g
    if color == "yellow":
        return r > b and g > b
    raise ValueError(f"unknown color word: {color}")


def generate_microworld(seed: int, n: int, image_side: int = 32, out_dir=None,
                        text_ratio: int = 4):
    """Build the synthetic image-grounded and text-only corpora.

    Deterministic in `seed`.  Produces image-grounded splits of sizes
    (n, ~n/10, ~n/10) and text-only splits `text_ratio` times larger.  When
    `out_dir` is given, writes JSONL datasets, PNGs, vocab, and a manifest.
    Returns (splits, manifest, vocab) where splits maps e.g. "image_train"
    to a list of Dialogue records.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if image_side < 16 or image_side & (image_side - 1):
        raise ValueError("image_side must be a power of two >= 16")
    rng = np.random.Generator(np.random.PCG64(seed))
    n_eval = max(1, round(n * 0.1))
    sizes = {
        "image_train": n,
        "image_valid": n_eval,
        "image_test": n_eval,
        "text_train": n * text_ratio,
        "text_valid": n_eval * text_ratio,
        "text_test": n_eval * text_ratio,
    }

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / "images").mkdir(exist_ok=True)
        except OSError as e:
            raise OSError(f"cannot create output directory {out_dir}: {e}") from e

    splits: dict[str, list[Dialogue]] = {}
    img_counter = 0
    for split, count in sizes.items():
        records = []
        grounded = split.startswith("image")
        for _ in range(count):
            scene = sample_scene(rng, image_side)
            dialogue = scene_dialogue(scene, rng)
            if grounded:
                ref = f"images/img_{img_counter:06d}.png"
                img_counter += 1
                if out_dir is not None:
                    save_png(render_scene(scene), out_dir / ref)
                dialogue = replace(dialogue, image_ref=ref)
            records.append(dialogue)
        splits[split] = records

    all_tokens = [
        list(rec.joint_text())
        for records in splits.values()
        for rec in records
    ]
    vocab = build_vocab(all_tokens, max_size=512)

    manifest = {
        "seed": int(seed),
        "image_side": int(image_side),
        "splits": {k: len(v) for k, v in splits.items()},
        "vocab_size": len(vocab),
    }
    if out_dir is not None:
        for split, records in splits.items():
            save_dataset(records, out_dir / f"{split}.jsonl")
        vocab.save(out_dir / "vocab.txt")
        (out_dir / "manifest.json").write_text(
            json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
    return splits, manifest, vocab
