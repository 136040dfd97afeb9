"""Keypoint vocabulary, learnable attribute templates and the frozen text encoder.

Each keypoint owns ``n_attributes`` templates of ``L`` continuous tokens. The
keypoint-name tokens are spliced into a template at a per-template placement
index (drawn once at construction). Templates are pushed through a small
seeded transformer whose weights never change.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn

from ppap.errors import InvalidArgument

UNK_TOKEN = "<unk>"
TOKEN_INIT_STD = 0.02


def tokenize(name: str) -> list[str]:
    """Whitespace tokenizer; underscores count as whitespace."""
    return name.replace("_", " ").lower().split()


@dataclass
class KeypointVocab:
    names: list[str]
    flip_pairs: list[tuple[int, int]] = field(default_factory=list)
    words: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.names) < 1:
            raise InvalidArgument("keypoint vocabulary is empty")
        self.flip_pairs = [(int(a), int(b)) for a, b in self.flip_pairs]
        seen = set()
        for a, b in self.flip_pairs:
            if a == b or not (0 <= a < self.num_keypoints and 0 <= b < self.num_keypoints):
                raise InvalidArgument(f"bad flip pair ({a}, {b}) for K={self.num_keypoints}")
            if a in seen or b in seen:
                raise InvalidArgument(f"index repeated in flip_pairs: ({a}, {b})")
            seen.update((a, b))
        if not self.words:
            words = sorted({w for n in self.names for w in tokenize(n)})
            self.words = [UNK_TOKEN] + words

    @property
    def num_keypoints(self) -> int:
        return len(self.names)

    def token_ids(self, text: str) -> list[int]:
        lookup = {w: i for i, w in enumerate(self.words)}
        ids = [lookup.get(w, 0) for w in tokenize(text)]
        return ids or [0]

    @property
    def name_token_ids(self) -> list[list[int]]:
        return [self.token_ids(n) for n in self.names]

    def flip_permutation(self) -> list[int]:
        perm = list(range(self.num_keypoints))
        for a, b in self.flip_pairs:
            perm[a], perm[b] = b, a
        return perm

    def to_dict(self) -> dict:
        return {"names": list(self.names), "flip_pairs": [list(p) for p in self.flip_pairs]}

    @classmethod
    def from_dict(cls, d: dict) -> "KeypointVocab":
        return cls(names=list(d["names"]), flip_pairs=[tuple(p) for p in d.get("flip_pairs", [])])

    @classmethod
    def load(cls, path) -> "KeypointVocab":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


@dataclass
class AttributeTemplate:
    """One template: ``L`` token vectors and where the name gets inserted."""

    tokens: torch.Tensor  # (L, C_tok)
    placement_index: int

    def __post_init__(self):
        if not 0 <= self.placement_index <= self.tokens.shape[0]:
            raise InvalidArgument(
                f"placement_index {self.placement_index} outside [0, {self.tokens.shape[0]}]"
            )


class _Block(nn.Module):
    """Pre-norm single-head transformer block."""

    def __init__(self, width: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.out = nn.Linear(width, width)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))

    def forward(self, x):
        q, k, v = self.qkv(self.ln1(x)).chunk(3, dim=-1)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)
        x = x + self.out(att @ v)
        return x + self.mlp(self.ln2(x))


class TextEncoder(nn.Module):
    """Small seeded transformer standing in for a pre-trained text tower.

    All parameters have ``requires_grad=False``; gradients still flow back to
    the *input* token vectors.
    """

    def __init__(self, n_words: int, token_dim: int = 64, embed_dim: int = 64,
                 n_layers: int = 2, max_len: int = 64, seed: int = 0):
        super().__init__()
        self.seed = seed
        self.token_dim = token_dim
        self.embed_dim = embed_dim
        self.word_embedding = nn.Embedding(n_words, token_dim)
        self.positional = nn.Parameter(torch.zeros(max_len, token_dim))
        self.blocks = nn.ModuleList([_Block(token_dim) for _ in range(n_layers)])
        self.ln_final = nn.LayerNorm(token_dim)
        self.proj = nn.Linear(token_dim, embed_dim, bias=False)

        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                elif ".ln" in name or name.startswith("ln_"):
                    p.fill_(1.0)
                elif p.dim() == 2 and ("embedding" in name or name == "positional"):
                    p.copy_(torch.randn(p.shape, generator=gen) * TOKEN_INIT_STD)
                else:
                    p.copy_(torch.randn(p.shape, generator=gen) / math.sqrt(p.shape[-1]))
        self.requires_grad_(False)

    def embed_words(self, ids: Sequence[int]) -> torch.Tensor:
        idx = torch.as_tensor(list(ids), dtype=torch.long, device=self.positional.device)
        return self.word_embedding(idx)

    def forward(self, seq: torch.Tensor) -> torch.Tensor:
        """Encode ``(..., T, C_tok)`` token sequences to ``(..., C_emb)``."""
        if seq.shape[-2] == 0:
            raise InvalidArgument("cannot encode an empty token sequence")
        if seq.shape[-2] > self.positional.shape[0]:
            raise InvalidArgument(f"sequence length {seq.shape[-2]} exceeds {self.positional.shape[0]}")
        x = seq + self.positional[: seq.shape[-2]]
        for block in self.blocks:
            x = block(x)
        return self.proj(self.ln_final(x).mean(dim=-2))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def encode_text(seq: torch.Tensor, enc: TextEncoder) -> torch.Tensor:
    return enc(seq)


def render_sequence(template: AttributeTemplate, keypoint_index: int, vocab: KeypointVocab,
                    enc: TextEncoder) -> torch.Tensor:
    """Insert the keypoint's name embeddings at the template's placement index."""
    if not 0 <= keypoint_index < vocab.num_keypoints:
        raise InvalidArgument(f"keypoint_index {keypoint_index} out of range")
    name = enc.embed_words(vocab.name_token_ids[keypoint_index]).to(template.tokens.dtype)
    j = template.placement_index
    return torch.cat([template.tokens[:j], name, template.tokens[j:]], dim=0)


def render_agnostic(template: AttributeTemplate) -> torch.Tensor:
    return template.tokens


class PromptSet(nn.Module):
    """K x N_p grid of learnable templates.

    ``tokens`` has shape ``(K, N_p, L, C_tok)``; ``placement`` is a fixed
    ``(K, N_p)`` integer buffer.
    """

    def __init__(self, vocab: KeypointVocab, tokens: torch.Tensor, placement: torch.Tensor):
        super().__init__()
        self.vocab = vocab
        self.tokens = nn.Parameter(tokens)
        self.register_buffer("placement", placement.long())

    @property
    def n_attributes(self) -> int:
        return self.tokens.shape[1]

    @property
    def template_length(self) -> int:
        return self.tokens.shape[2]

    def template(self, i: int, t: int) -> AttributeTemplate:
        return AttributeTemplate(self.tokens[i, t], int(self.placement[i, t]))

    def encode(self, enc: TextEncoder) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(full, agnostic)`` embeddings, each ``(K, N_p, C_emb)``."""
        agnostic = enc(self.tokens)
        full = []
        for i in range(self.vocab.num_keypoints):
            # templates of one keypoint share a length, so they batch together
            seqs = [render_sequence(self.template(i, t), i, self.vocab, enc)
                    for t in range(self.n_attributes)]
            full.append(enc(torch.stack(seqs)))
        return torch.stack(full), agnostic


def build_prompt_set(vocab: KeypointVocab, n_attributes: int, template_length: int,
                     rng_seed: int, token_dim: int = 64, gkp: bool = True) -> PromptSet:
    """Draw token vectors ~ N(0, 0.02^2) and placement indices ~ U{0..L}.

    With ``gkp=False`` every name goes after the attribute tokens (fixed
    suffix placement).
    """
    if vocab is None or vocab.num_keypoints < 1:
        raise InvalidArgument("keypoint vocabulary is empty")
    if n_attributes < 1 or template_length < 1:
        raise InvalidArgument("n_attributes and template_length must be >= 1")
    gen = torch.Generator().manual_seed(rng_seed)
    k = vocab.num_keypoints
    tokens = torch.randn(k, n_attributes, template_length, token_dim, generator=gen) * TOKEN_INIT_STD
    if gkp:
        placement = torch.randint(0, template_length + 1, (k, n_attributes), generator=gen)
    else:
        placement = torch.full((k, n_attributes), template_length)
    return PromptSet(vocab, tokens, placement)


def build_text_encoder(vocab: KeypointVocab, token_dim: int = 64, embed_dim: int = 64,
                       seed: int = 0) -> TextEncoder:
    return TextEncoder(len(vocab.words), token_dim=token_dim, embed_dim=embed_dim, seed=seed)


__all__ = [
    "AttributeTemplate", "KeypointVocab", "PromptSet", "TextEncoder", "build_prompt_set",
    "build_text_encoder", "encode_text", "render_agnostic", "render_sequence", "tokenize",
]
