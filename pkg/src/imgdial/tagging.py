"""Part-of-speech tagging for the topical-word analyses.

Topical words are nouns and verbs under the Penn tag set.  The bundled
tagger is a lexicon plus suffix rules: good enough to be deterministic and
self-contained, and exact on the micro-world vocabulary, which ships with
gold tags.  Any tagger can be swapped in; it just has to map a token list
to a tag list.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field

TOPICAL_TAGS = frozenset(
    ["NN", "NNS", "NNP", "NNPS", "VB", "VBD", "VBG", "VBN", "VBP", "VBZ"]
)


def load_stopwords() -> tuple[str, ...]:
    """The bundled list of 179 English stop words."""
    text = importlib.resources.files("imgdial").joinpath("stopwords.txt").read_text("utf-8")
    return tuple(text.split())


# tags for every word the micro-world templates can emit
MICROWORLD_POS = {
    # shapes and scene nouns
    "circle": "NN", "square": "NN", "triangle": "NN",
    "picture": "NN", "image": "NN", "photo": "NN", "frame": "NN",
    "scene": "NN", "details": "NNS", "description": "NN", "time": "NN",
    "area": "NN", "part": "NN", "spot": "NN", "region": "NN", "corner": "NN",
    "side": "NN", "friend": "NN", "someone": "NN", "something": "NN",
    "top": "NN", "middle": "NN", "bottom": "NN",
    "left": "NN", "center": "NN", "right": "NN",
    # colors are adjectives, hence not topical
    "red": "JJ", "green": "JJ", "blue": "JJ", "yellow": "JJ",
    "curious": "JJ", "best": "JJS", "closely": "RB", "please": "UH",
    # verbs
    "see": "VB", "describe": "VB", "tell": "VB", "shows": "VBZ",
    "wonder": "VBP", "appears": "VBZ", "look": "VB", "looking": "VBG",
    "looks": "VBZ", "take": "VB", "give": "VB", "think": "VBP",
    "squint": "VB", "guessed": "VBD", "told": "VBD", "find": "VB",
    "holds": "VBZ", "colored": "VBN", "painted": "VBN",
    "is": "VBZ", "can": "MD", "could": "MD", "be": "VB", "am": "VBP",
    # function words
    "i": "PRP", "you": "PRP", "me": "PRP", "it": "PRP", "my": "PRP$",
    "your": "PRP$", "what": "WP", "that": "WDT", "this": "DT", "a": "DT",
    "an": "DT", "the": "DT", "there": "EX", "do": "VBP", "if": "IN",
    "in": "IN", "at": "IN", "for": "IN", "with": "IN", "about": "IN",
    "near": "IN", "and": "CC", "?": ".", ".": ".", ",": ",", "!": ".",
}

_SUFFIX_RULES = (
    ("ing", "VBG"),
    ("ed", "VBD"),
    ("ly", "RB"),
    ("ness", "NN"),
    ("ment", "NN"),
    ("tion", "NN"),
    ("s", "NNS"),
)


def rule_tag(tokens: list[str], lexicon: dict[str, str] | None = None) -> list[str]:
    """Lexicon lookup, then suffix rules, then the noun default."""
    lex = MICROWORLD_POS if lexicon is None else lexicon
    tags = []
    for tok in tokens:
        tag = lex.get(tok)
        if tag is None:
            if not any(ch.isalpha() for ch in tok):
                tag = "CD" if any(ch.isdigit() for ch in tok) else "."
            else:
                for suffix, stag in _SUFFIX_RULES:
                    if len(tok) > len(suffix) + 2 and tok.endswith(suffix):
                        tag = stag
                        break
                else:
                    tag = "NN"
        tags.append(tag)
    return tags


@dataclass
class TopicalLexicon:
    """Bundles a tagger, the topical tag set, and the stop-word list."""

    tagger: callable = rule_tag
    topical_tags: frozenset = TOPICAL_TAGS
    stop_words: frozenset = field(default_factory=lambda: frozenset(load_stopwords()))

    def topical_set(self, tokens) -> set[str]:
        tokens = list(tokens)
        tags = self.tagger(tokens)
        return {t for t, tag in zip(tokens, tags) if tag in self.topical_tags}

    def is_stop(self, token: str) -> bool:
        return token in self.stop_words

    def word_kind(self, token: str, tag: str | None = None) -> str:
        """'stop', 'topical', or 'other'; stop-word membership wins."""
        if self.is_stop(token):
            return "stop"
        if tag is None:
            tag = self.tagger([token])[0]
        return "topical" if tag in self.topical_tags else "other"
