"""Closed-grammar tokenizer, learned token/position embeddings and the conditioning carrier.

Vocabulary order is the id: ``<pad>`` = 0, ``<null>`` = 1, then grammar words,
then registered placeholders in registration order.
"""

import logging
import os
import re
from dataclasses import dataclass, replace
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..errors import InputError, ShapeError, UnknownTokenError
from ..models.schemas import TextConfig
from ..numerics import ParamStore, Rng, Tensor, add, take_rows
from .layers import ParamSpec, init_specs

logger = logging.getLogger(__name__)

PAD = "<pad>"
NULL = "<null>"
PAD_ID = 0
NULL_ID = 1
SPECIAL_TOKENS = (PAD, NULL)
CLASS_NOUN = "sprite"
RELATIONS = ("meets", "shakes", "with")
PLACEHOLDER_PATTERN = re.compile(r"^[a-z0-9]+$")

TOKEN_EMBEDDING = "text/token_embedding"
POSITION_EMBEDDING = "text/position_embedding"

# additive attention bias on padded keys
PAD_BIAS = -1e4


class Vocabulary:
    def __init__(self, tokens: Sequence[str], path: Optional[str] = None):
        tokens = list(tokens)
        if tokens[:2] != list(SPECIAL_TOKENS):
            raise InputError(f"vocabulary must start with {PAD} and {NULL}")
        if len(set(tokens)) != len(tokens):
            raise InputError("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self.path = path or "<in-memory vocabulary>"
        self._ids = {token: i for i, token in enumerate(tokens)}

    @classmethod
    def for_grammar(cls, n_identities: int, n_backgrounds: int) -> "Vocabulary":
        words = list(SPECIAL_TOKENS)
        words += [f"ident{i}" for i in range(n_identities)]
        words += [CLASS_NOUN, *RELATIONS, "in"]
        words += [f"bg{i}" for i in range(n_backgrounds)]
        return cls(words)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: object) -> bool:
        return token in self._ids

    def id(self, token: str) -> int:
        if token not in self._ids:
            raise UnknownTokenError(token, self.path)
        return self._ids[token]

    def append(self, token: str) -> "Vocabulary":
        if token in self._ids:
            raise InputError(f"token {token!r} is already in the vocabulary")
        return Vocabulary(self.tokens + [token], self.path)

    def tokenize(self, prompt: str, seq_len: int) -> np.ndarray:
        """Lowercased whitespace split, padded or truncated to ``seq_len`` ids."""
        ids = [self.id(word) for word in prompt.lower().split()]
        if len(ids) > seq_len:
            logger.warning("Vocabulary: prompt %r truncated to %d tokens", prompt, seq_len)
            ids = ids[:seq_len]
        return np.asarray(ids + [PAD_ID] * (seq_len - len(ids)), dtype=np.int64)

    def tokenize_batch(self, prompts: Iterable[str], seq_len: int) -> np.ndarray:
        return np.stack([self.tokenize(prompt, seq_len) for prompt in prompts])

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            handle.write("\n".join(self.tokens) + "\n")
        self.path = path

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        if not os.path.exists(path):
            raise InputError(f"vocabulary file not found: {path}")
        with open(path, "r", encoding="utf-8") as handle:
            tokens = [line.strip() for line in handle if line.strip()]
        return cls(tokens, path)


def null_token_ids(seq_len: int, batch: int = 1) -> np.ndarray:
    return np.full((batch, seq_len), NULL_ID, dtype=np.int64)


def key_padding_bias(token_ids: np.ndarray) -> np.ndarray:
    """(N, 1, L) additive bias masking ``<pad>`` keys."""
    ids = np.asarray(token_ids)
    return np.where(ids == PAD_ID, PAD_BIAS, 0.0)[:, None, :]


class TextEncoder:
    """Per-token learned vectors plus learned positional vectors."""

    def __init__(self, config: TextConfig):
        self.config = config

    @property
    def seq_len(self) -> int:
        return self.config.seq_len

    def specs(self, vocab_size: int) -> List[ParamSpec]:
        dim = self.config.embed_dim
        return [
            ParamSpec(TOKEN_EMBEDDING, (vocab_size, dim), "fan_in", dim),
            ParamSpec(POSITION_EMBEDDING, (self.config.seq_len, dim), "fan_in", dim),
        ]

    def init_params(self, vocab_size: int, rng: Rng) -> ParamStore:
        store = ParamStore()
        init_specs(self.specs(vocab_size), store, rng)
        return store

    def embed(self, params: ParamStore, token_ids: np.ndarray) -> Tensor:
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.ndim != 2 or ids.shape[1] != self.seq_len:
            raise ShapeError(f"embed: expected token ids of shape (N, {self.seq_len}), got {ids.shape}")
        tokens = take_rows(params.leaf(TOKEN_EMBEDDING), ids)
        positions = take_rows(params.leaf(POSITION_EMBEDDING), np.arange(self.seq_len))
        return add(tokens, positions)


def register_placeholder(
    vocab: Vocabulary, params: ParamStore, token: str, rng: Rng
) -> Tuple[Vocabulary, ParamStore]:
    """Append ``token`` and its embedding row; existing ids and rows are untouched.

    The new row is the mean of the non-special rows plus seeded noise whose
    norm is half their mean norm.
    """
    if not PLACEHOLDER_PATTERN.match(token):
        raise InputError(f"placeholder token {token!r} must match [a-z0-9]+")
    new_vocab = vocab.append(token)
    table = params[TOKEN_EMBEDDING]
    if table.shape[0] != len(vocab):
        raise ShapeError(f"register_placeholder: embedding has {table.shape[0]} rows for {len(vocab)} tokens")
    existing = table[len(SPECIAL_TOKENS) :].astype(np.float64)
    mean = existing.mean(axis=0)
    mean_norm = float(np.linalg.norm(existing, axis=1).mean())
    direction = rng.standard_normal(table.shape[1]).astype(np.float64)
    direction /= max(float(np.linalg.norm(direction)), 1e-12)
    row = (mean + 0.5 * mean_norm * direction).astype(table.dtype)

    updated = params.copy()
    updated[TOKEN_EMBEDDING] = np.concatenate([table, row[None, :]], axis=0)
    logger.info("Conditioning: registered placeholder %r as id %d", token, len(vocab))
    return new_vocab, updated


@dataclass(frozen=True)
class Conditioning:
    """Token ids for the text branch plus an optional anchor latent.

    ``anchor_mask`` (N,) switches the anchor off per element (1 keeps it).
    """

    token_ids: np.ndarray
    anchor_latent: Optional[np.ndarray] = None
    anchor_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        ids = np.asarray(self.token_ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        object.__setattr__(self, "token_ids", ids)
        if self.anchor_latent is not None:
            anchor = np.asarray(self.anchor_latent)
            if anchor.ndim != 4 or anchor.shape[0] != ids.shape[0]:
                raise ShapeError(f"Conditioning: anchor {anchor.shape} does not match {ids.shape[0]} prompts")
            object.__setattr__(self, "anchor_latent", anchor)
            mask = np.ones(ids.shape[0], dtype=np.float32) if self.anchor_mask is None else self.anchor_mask
            mask = np.asarray(mask, dtype=np.float32)
            if mask.shape != (ids.shape[0],):
                raise ShapeError(f"Conditioning: anchor mask {mask.shape} does not match batch {ids.shape[0]}")
            object.__setattr__(self, "anchor_mask", mask)
        elif self.anchor_mask is not None:
            object.__setattr__(self, "anchor_mask", None)

    @property
    def batch_size(self) -> int:
        return int(self.token_ids.shape[0])

    @property
    def has_anchor(self) -> bool:
        return self.anchor_latent is not None

    @classmethod
    def from_prompts(
        cls,
        vocab: Vocabulary,
        prompts: Sequence[str],
        seq_len: int,
        anchor_latent: Optional[np.ndarray] = None,
    ) -> "Conditioning":
        return cls(vocab.tokenize_batch(prompts, seq_len), anchor_latent)

    @classmethod
    def null(cls, seq_len: int, batch: int = 1, anchor_latent: Optional[np.ndarray] = None) -> "Conditioning":
        return cls(null_token_ids(seq_len, batch), anchor_latent)

    def with_null_text(self) -> "Conditioning":
        """Same anchor, text replaced by the ``<null>`` sequence."""
        return replace(self, token_ids=null_token_ids(self.token_ids.shape[1], self.batch_size))

    def select(self, index: Union[slice, np.ndarray]) -> "Conditioning":
        """Rows picked by a slice or an integer index array; the batch axis is kept."""
        if not isinstance(index, slice):
            index = np.asarray(index, dtype=np.int64)
        if self.anchor_latent is None:
            return Conditioning(self.token_ids[index])
        return Conditioning(self.token_ids[index], self.anchor_latent[index], self.anchor_mask[index])
