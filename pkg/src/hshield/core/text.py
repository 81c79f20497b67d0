"""Word-level prompt tokenization over a small fixed vocabulary.

Prompts are lowercase word sequences padded to a fixed length. One token
("sks") is designated as the subject placeholder that personalization binds.
"""

from dataclasses import dataclass, field

import torch
from torch import Tensor

PAD_TOKEN = "<pad>"
PLACEHOLDER_TOKEN = "sks"

# 64 entries: pad + placeholder + the words used by the bundled prompt
# templates, plus generic filler so prompts can be varied without retraining.
_DEFAULT_WORDS = [
    PAD_TOKEN, PLACEHOLDER_TOKEN,
    "a", "an", "the", "of", "on", "at", "in", "with", "and",
    "photo", "picture", "portrait", "painting", "drawing", "image", "closeup",
    "dslr", "person", "face", "artwork", "style", "subject",
    "looking", "sitting", "standing", "wearing", "talking", "holding", "smiling",
    "mirror", "chair", "floor", "glasses", "phone", "hat", "table", "wall",
    "red", "green", "blue", "yellow", "purple", "orange", "white", "black",
    "bright", "dark", "small", "large", "round", "square", "striped", "plain",
    "circle", "stripe", "pattern", "texture", "background", "color", "shape",
    "one", "two",
]


@dataclass(frozen=True)
class Vocabulary:
    words: tuple
    seq_len: int = 10

    def __post_init__(self):
        if len(set(self.words)) != len(self.words):
            raise ValueError("vocabulary contains duplicate words")
        if PAD_TOKEN not in self.words or PLACEHOLDER_TOKEN not in self.words:
            raise ValueError("vocabulary must contain the pad and placeholder tokens")

    @property
    def size(self) -> int:
        return len(self.words)

    @property
    def pad_id(self) -> int:
        return self.words.index(PAD_TOKEN)

    @property
    def placeholder_id(self) -> int:
        return self.words.index(PLACEHOLDER_TOKEN)

    def tokenize(self, prompt: str) -> list:
        """Split a prompt into token ids, padded to seq_len."""
        words = prompt.lower().split()
        unknown = [w for w in words if w not in self.words]
        if unknown:
            raise ValueError(f"words not in vocabulary: {unknown}")
        if len(words) > self.seq_len:
            raise ValueError(f"prompt has {len(words)} tokens, max is {self.seq_len}")
        ids = [self.words.index(w) for w in words]
        ids += [self.pad_id] * (self.seq_len - len(ids))
        return ids


def default_vocabulary(seq_len: int = 10) -> Vocabulary:
    return Vocabulary(words=tuple(_DEFAULT_WORDS), seq_len=seq_len)


@dataclass
class PromptEmbedding:
    """A tokenized prompt plus the token positions of interest.

    Embedding lookup happens inside the model forward pass so that gradient
    flows into the (trainable) token table; `embeddings` is cached here only
    when a caller asks for a concrete view via `embed`.
    """

    text: str
    token_ids: Tensor
    placeholder_positions: tuple = field(default_factory=tuple)

    @property
    def seq_len(self) -> int:
        return int(self.token_ids.shape[0])

    def embed(self, table: Tensor) -> Tensor:
        """Materialize (seq_len, d_text) embeddings from a token table."""
        if int(self.token_ids.max()) >= table.shape[0]:
            raise ValueError("token id out of range for embedding table")
        return table[self.token_ids]


def encode_prompt(vocab: Vocabulary, prompt: str) -> PromptEmbedding:
    ids = vocab.tokenize(prompt)
    positions = tuple(i for i, t in enumerate(ids) if t == vocab.placeholder_id)
    return PromptEmbedding(
        text=prompt,
        token_ids=torch.tensor(ids, dtype=torch.long),
        placeholder_positions=positions,
    )
