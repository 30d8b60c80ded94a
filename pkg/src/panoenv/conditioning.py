"""Vocabulary, template captioner and the bag-of-embeddings text encoder."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Module, glorot

PAD, MASK, CLS = "[PAD]", "[MASK]", "[CLS]"

# scene label -> dominant texture of its walls
SCENE_TEXTURE: dict[str, str] = {
    "kitchen": "checker",
    "bathroom": "checker",
    "bedroom": "stripes",
    "closet": "stripes",
    "hallway": "grid",
    "garage": "grid",
    "office": "dots",
    "studio": "dots",
    "library": "waves",
    "lounge": "waves",
    "dining": "diagonal",
    "laundry": "diagonal",
    "stairs": "rings",
    "attic": "rings",
    "porch": "plain",
    "cellar": "plain",
}
SCENES: tuple[str, ...] = tuple(SCENE_TEXTURE)
TEXTURES: tuple[str, ...] = tuple(dict.fromkeys(SCENE_TEXTURE.values()))
# subjects used by the generic (non-indoor) image domain the base generator starts from
GENERIC_SUBJECTS: tuple[str, ...] = ("field", "sky", "fabric", "stone")

_WORDS = ("a", "photo", "of", "leave", "the", "walk", "past", "stop", "at", "and", ",")

CAPTION_PREFIX = ("a", "photo", "of")


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        for special in (PAD, MASK, CLS):
            if special not in tokens:
                raise ValueError(f"vocabulary lacks {special}")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def ids(self, tokens: Iterable[str]) -> list[int]:
        out = []
        for t in tokens:
            if t not in self.index:
                raise KeyError(f"token {t!r} not in vocabulary")
            out.append(self.index[t])
        return out

    @property
    def mask_id(self) -> int:
        return self.index[MASK]


def default_vocabulary() -> Vocabulary:
    return Vocabulary([PAD, MASK, CLS, *_WORDS, *SCENES, *TEXTURES, *GENERIC_SUBJECTS])


def tokenize(text: str) -> list[str]:
    return text.replace(",", " , ").split()


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens).replace(" ,", ",")


def synth_caption(view, meta: Mapping) -> list[str]:
    """Deterministic stand-in for an image captioner: ``a photo of <texture> <scene>``.

    ``meta`` carries either ``view_scenes`` (36 labels ordered by elevation then
    heading) or a single ``scene``; ``texture`` overrides the scene's default.
    """
    if "view_scenes" in meta:
        scene = meta["view_scenes"][view.elevation_index * 12 + view.heading_index]
    elif "scene" in meta:
        scene = meta["scene"]
    else:
        raise ValueError("caption metadata needs 'scene' or 'view_scenes'")
    texture = meta.get("texture") or SCENE_TEXTURE.get(scene)
    if texture is None:
        raise ValueError(f"no texture known for scene {scene!r}")
    return [*CAPTION_PREFIX, texture, scene]


class TextEncoder(Module):
    """Mean-pooled token embeddings followed by an optional linear projection."""

    def __init__(self, vocab: Vocabulary, dim: int = 64, cond_dim: int | None = 64, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.vocab = vocab
        self.dim = dim
        self.add_param("embed", rng.normal(0.0, 1.0 / np.sqrt(dim), size=(len(vocab), dim)))
        self.cond_dim = dim
        if cond_dim is not None:
            self.add_param("proj.W", glorot(rng, cond_dim, dim))
            self.cond_dim = cond_dim

    @property
    def has_projection(self) -> bool:
        return "proj.W" in self.params

    def pooled(self, batch: Sequence[Sequence[str]]) -> Tensor:
        if not batch or any(len(toks) == 0 for toks in batch):
            raise ValueError("cannot encode an empty token sequence")
        ids = [self.vocab.ids(toks) for toks in batch]
        flat = [i for row in ids for i in row]
        avg = np.zeros((len(ids), len(flat)))
        col = 0
        for r, row in enumerate(ids):
            avg[r, col : col + len(row)] = 1.0 / len(row)
            col += len(row)
        return ad.matmul(ad.tensor(avg), ad.take(self.params["embed"], flat))

    def encode_batch(self, batch: Sequence[Sequence[str]]) -> Tensor:
        pooled = self.pooled(batch)
        if self.has_projection:
            return self.dense("proj.W", pooled)
        return pooled


def encode_text(enc: TextEncoder, tokens: Sequence[str]) -> Tensor:
    """Conditioning vector (shape ``(cond_dim,)``) for one token sequence."""
    return ad.reshape(enc.encode_batch([tokens]), (enc.cond_dim,))


@dataclass(frozen=True)
class CaptionPair:
    image: str  # "<panorama path>#<heading>,<elevation>"
    caption: tuple[str, ...]

    def __post_init__(self):
        if not self.caption:
            raise ValueError("caption must be nonempty")

    @property
    def source(self) -> tuple[str, int, int]:
        path, _, idx = self.image.rpartition("#")
        heading, elevation = (int(v) for v in idx.split(","))
        return path, heading, elevation


def write_pairs(path: str | os.PathLike, pairs: Iterable[CaptionPair]) -> None:
    lines = [json.dumps({"image": p.image, "caption": detokenize(p.caption)}) for p in pairs]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_pairs(path: str | os.PathLike) -> list[CaptionPair]:
    pairs = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        obj = json.loads(line)
        try:
            pairs.append(CaptionPair(obj["image"], tuple(tokenize(obj["caption"]))))
        except (KeyError, ValueError) as exc:
            raise ValueError(f"{path}:{n}: bad caption pair ({exc})") from exc
    return pairs
