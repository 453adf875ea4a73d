"""Tiny encoder-decoder model plus checkpoint and inference helpers.

The architecture is a standard T5 stack scaled down to desk size; the
same parameter set serves the query, response, and relevance tasks
(single shared model). Checkpoints are self-contained directories:
weights, architecture hyperparameters, and vocabulary.
"""

from __future__ import annotations

import json
import random
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
from transformers import T5Config, T5ForConditionalGeneration

from .vocab import (
    EOS_ID,
    MATCHED,
    MATCHED_ID,
    MISMATCHED,
    MISMATCHED_ID,
    PAD_ID,
    Vocabulary,
)

RELEVANCE_PROMPT = "judge relevance of knowledge to query: query: {query} knowledge: {record}"


@dataclass(frozen=True)
class ModelSpec:
    d_model: int = 64
    d_ff: int = 128
    num_layers: int = 2
    num_heads: int = 2

    def __post_init__(self):
        if min(self.d_model, self.d_ff, self.num_layers, self.num_heads) <= 0:
            raise ValueError("model dimensions must be positive")
        if self.d_model % self.num_heads:
            raise ValueError("d_model must divide evenly across heads")


def build_model(vocab_size: int, spec: ModelSpec = ModelSpec(),
                seed: int = 0) -> T5ForConditionalGeneration:
    torch.manual_seed(seed)
    config = T5Config(
        vocab_size=vocab_size,
        d_model=spec.d_model,
        d_kv=spec.d_model // spec.num_heads,
        d_ff=spec.d_ff,
        num_layers=spec.num_layers,
        num_decoder_layers=spec.num_layers,
        num_heads=spec.num_heads,
        relative_attention_num_buckets=8,
        dropout_rate=0.1,
        pad_token_id=PAD_ID,
        eos_token_id=EOS_ID,
        decoder_start_token_id=PAD_ID,
        feed_forward_proj="relu",
        tie_word_embeddings=True,
    )
    return T5ForConditionalGeneration(config)


def save_checkpoint(model: T5ForConditionalGeneration, vocab: Vocabulary,
                    path: str | Path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path / "model.pt")
    spec = ModelSpec(
        d_model=model.config.d_model,
        d_ff=model.config.d_ff,
        num_layers=model.config.num_layers,
        num_heads=model.config.num_heads,
    )
    (path / "spec.json").write_text(json.dumps(asdict(spec)), encoding="utf-8")
    vocab.save(path / "vocab.json")
    if extra is not None:
        (path / "state.json").write_text(
            json.dumps(extra, indent=2, sort_keys=True), encoding="utf-8"
        )
    return path


def load_checkpoint(path: str | Path) -> tuple[T5ForConditionalGeneration, Vocabulary]:
    path = Path(path)
    vocab = Vocabulary.load(path / "vocab.json")
    spec = ModelSpec(**json.loads((path / "spec.json").read_text(encoding="utf-8")))
    model = build_model(len(vocab), spec)
    model.load_state_dict(torch.load(path / "model.pt", map_location="cpu"))
    model.eval()
    return model, vocab


def batch_encode(vocab: Vocabulary, texts: list[str],
                 max_length: int) -> tuple[torch.Tensor, torch.Tensor]:
    rows = [vocab.encode(t, max_length=max_length) for t in texts]
    width = max(len(r) for r in rows)
    ids = torch.full((len(rows), width), PAD_ID, dtype=torch.long)
    mask = torch.zeros((len(rows), width), dtype=torch.long)
    for i, row in enumerate(rows):
        ids[i, : len(row)] = torch.tensor(row, dtype=torch.long)
        mask[i, : len(row)] = 1
    return ids, mask


@torch.no_grad()
def generate_text(model: T5ForConditionalGeneration, vocab: Vocabulary,
                  prompt: str, max_output_tokens: int = 128,
                  beam_size: int = 1, input_length: int = 1024) -> str:
    model.eval()
    ids, mask = batch_encode(vocab, [prompt], input_length)
    # pad is suppressed so min_new_tokens=1 always yields a visible word
    out = model.generate(
        input_ids=ids,
        attention_mask=mask,
        max_new_tokens=max(1, max_output_tokens),
        min_new_tokens=1,
        num_beams=max(1, beam_size),
        do_sample=False,
        suppress_tokens=[PAD_ID],
    )
    return vocab.decode(out[0].tolist())


@torch.no_grad()
def relevance_of(model: T5ForConditionalGeneration, vocab: Vocabulary,
                 query: str, record: str,
                 input_length: int = 1024) -> tuple[str, float]:
    """Label plus calibrated score: softmax over the two label logits at
    the first decoding step; score is p(MATCHED)."""
    model.eval()
    prompt = RELEVANCE_PROMPT.format(query=query, record=record)
    ids, mask = batch_encode(vocab, [prompt], input_length)
    start = torch.full((1, 1), PAD_ID, dtype=torch.long)
    logits = model(input_ids=ids, attention_mask=mask,
                   decoder_input_ids=start).logits[0, -1]
    pair = torch.softmax(logits[[MATCHED_ID, MISMATCHED_ID]], dim=-1)
    p_matched = float(pair[0])
    label = MATCHED if p_matched >= 0.5 else MISMATCHED
    return label, p_matched


@torch.no_grad()
def embed_texts(model: T5ForConditionalGeneration, vocab: Vocabulary,
                texts: list[str],
                input_length: int = 1024) -> tuple[list[list[float]], int]:
    """Mean-pooled encoder states under the attention mask."""
    model.eval()
    ids, mask = batch_encode(vocab, texts, input_length)
    states = model.encoder(input_ids=ids, attention_mask=mask).last_hidden_state
    weights = mask.unsqueeze(-1).to(states.dtype)
    pooled = (states * weights).sum(dim=1) / weights.sum(dim=1).clamp(min=1.0)
    return pooled.tolist(), int(states.shape[-1])


PRETRAIN_WORDS = [
    "find", "a", "an", "the", "in", "options", "there", "are", "no",
    "matching", "user", "system", "cheap", "moderate", "expensive",
    "north", "south", "east", "west", "centre", "restaurant", "hotel",
    "attraction", "how", "about", "one", "query", "knowledge", "context",
    "translate", "dialogue", "to", "generate", "response", "based", "on",
    "and", "judge", "relevance", "of", ":", ";", "[NOTHING]",
]


def pretrain_checkpoint(out_dir: str | Path, steps: int = 300,
                        seed: int = 0, spec: ModelSpec = ModelSpec(),
                        learning_rate: float = 3e-3) -> Path:
    """Produce the small pre-trained checkpoint the server boots from.

    Pre-training is a copy objective over short synthetic word strings:
    it teaches the decoder to emit real tokens conditioned on the
    encoder, which is the capability the downstream fine-tuning tasks
    (query and response generation both copy heavily) build on.
    """
    rng = random.Random(seed)
    vocab = Vocabulary.build([" ".join(PRETRAIN_WORDS)])
    model = build_model(len(vocab), spec, seed=seed)
    optimizer = torch.optim.AdamW(model.parameters(), lr=learning_rate)
    model.train()
    for _ in range(steps):
        batch = [
            " ".join(rng.choices(PRETRAIN_WORDS, k=rng.randint(2, 8)))
            for _ in range(8)
        ]
        ids, mask = batch_encode(vocab, batch, max_length=16)
        labels = ids.masked_fill(ids == PAD_ID, -100)
        loss = model(input_ids=ids, attention_mask=mask, labels=labels).loss
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    model.eval()
    return save_checkpoint(model, vocab, out_dir, extra={"pretrain_steps": steps, "seed": seed})
