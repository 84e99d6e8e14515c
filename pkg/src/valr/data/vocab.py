"""Word-level vocabulary built from the synthetic task lexicon."""

from __future__ import annotations

from ..errors import SchemaError

PAD, BOS, EOS, IMAGE, LATENT, END_LATENT, ANSWER, LATENT_SLOT = (
    "<pad>", "<bos>", "<eos>", "<image>", "<latent>", "</latent>", "Answer:", "<lat>")
SPECIALS = [PAD, BOS, EOS, IMAGE, LATENT, END_LATENT, ANSWER, LATENT_SLOT]

COLORS = ["red", "green", "blue", "yellow"]
SHAPES = ["square", "disk", "triangle"]
MAX_NUMBER = 31
WORDS = sorted({
    "how", "many", "objects", "are", "there", "?", "view", "shows", ".", "so", "in", "total",
    "what", "order", "do", "the", ",", "and", "first", "appear", "none", "of", "them", "is",
    "left", "right", "or", "at", "column", "neither", "object",
    *COLORS, *SHAPES,
})


class Vocabulary:
    """Bijective token <-> id map; specials take the lowest ids."""

    def __init__(self, tokens):
        self.tokens = list(tokens)
        self.ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self.ids) != len(self.tokens):
            raise SchemaError("vocabulary tokens are not unique")
        for name in ("pad", "bos", "eos", "image", "latent", "end_latent", "answer", "latent_slot"):
            setattr(self, name, self.ids[globals()[name.upper()]])

    @classmethod
    def from_lexicon(cls) -> "Vocabulary":
        return cls(SPECIALS + [str(n) for n in range(MAX_NUMBER + 1)] + WORDS)

    def __len__(self):
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        out = []
        for w in text.split():
            if w not in self.ids:
                raise SchemaError(f"word {w!r} is not in the vocabulary")
            out.append(self.ids[w])
        return out

    def decode(self, ids) -> str:
        return " ".join(self.tokens[int(i)] for i in ids)
