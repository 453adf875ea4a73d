"""Joint fine-tuning of the shared seq2seq model.

One model, one loss: query pairs and response pairs are shuffled into a
single stream and optimized together, so the two objectives weight each
turn equally (the mixture is 1:1 by construction of the pairs file, not
by reweighting). Relevance training reuses the same loop with label
tokens as one-word targets.
"""

from __future__ import annotations

import argparse
import json
import math
import random
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .model import (
    ModelSpec,
    RELEVANCE_PROMPT,
    batch_encode,
    build_model,
    relevance_of,
    save_checkpoint,
)
from .vocab import MATCHED, MISMATCHED, PAD_ID, Vocabulary


class DataError(ValueError):
    """Pairs file missing, empty, or malformed."""


KNOWN_TASKS = ("query", "response", "relevance")
WARMUP_SCHEDULES = ("noam", "linear", "constant")


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 3e-5
    batch_size: int = 128
    epochs: int = 50
    input_length: int = 1024
    output_length: int = 128
    warmup: str = "noam"
    warmup_steps: int = 100
    seed: int = 0
    early_stop: bool = True
    patience: int = 3
    validation_fraction: float = 0.1
    spec: ModelSpec = field(default_factory=ModelSpec)

    def __post_init__(self):
        positives = {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "input_length": self.input_length,
            "output_length": self.output_length,
            "warmup_steps": self.warmup_steps,
            "patience": self.patience,
        }
        for name, value in positives.items():
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.warmup not in WARMUP_SCHEDULES:
            raise ValueError(f"warmup must be one of {WARMUP_SCHEDULES}")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in [0, 1)")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass(frozen=True)
class TrainResult:
    run_id: str
    run_dir: Path
    history: tuple[EpochStats, ...]
    best_epoch: int
    stopped_early: bool

    @property
    def best_dir(self) -> Path:
        return self.run_dir / f"epoch_{self.best_epoch}"


def load_pairs(path: str | Path) -> list[dict]:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read pairs file {path}: {exc}") from exc
    pairs = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: not JSON: {exc}") from exc
        missing = {"task", "prompt", "target"} - set(obj)
        if missing:
            raise DataError(f"{path}:{lineno}: missing fields {sorted(missing)}")
        if obj["task"] not in KNOWN_TASKS:
            raise DataError(f"{path}:{lineno}: unknown task {obj['task']!r}")
        pairs.append({k: obj[k] for k in ("task", "prompt", "target")})
    if not pairs:
        raise DataError(f"pairs file {path} holds no training pairs")
    return pairs


def _lr_lambda(config: TrainingConfig):
    warmup = float(config.warmup_steps)
    if config.warmup == "constant":
        return lambda step: 1.0
    if config.warmup == "linear":
        return lambda step: min(1.0, (step + 1) / warmup)
    # noam: linear warmup then inverse-sqrt decay, normalized so the
    # peak factor is 1.0 at the end of warmup
    return lambda step: min((step + 1) / warmup, math.sqrt(warmup / (step + 1)))


def _epoch_loss(model, vocab, pairs, config: TrainingConfig,
                optimizer=None, scheduler=None, rng=None) -> float:
    training = optimizer is not None
    model.train(training)
    order = list(range(len(pairs)))
    if training and rng is not None:
        rng.shuffle(order)
    total, count = 0.0, 0
    for start in range(0, len(order), config.batch_size):
        chunk = [pairs[i] for i in order[start : start + config.batch_size]]
        ids, mask = batch_encode(
            vocab, [p["prompt"] for p in chunk], config.input_length
        )
        labels, _ = batch_encode(
            vocab, [p["target"] for p in chunk], config.output_length
        )
        labels = labels.masked_fill(labels == PAD_ID, -100)
        with torch.set_grad_enabled(training):
            loss = model(input_ids=ids, attention_mask=mask, labels=labels).loss
        if training:
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            if scheduler is not None:
                scheduler.step()
        total += float(loss.detach()) * len(chunk)
        count += len(chunk)
    return total / max(count, 1)


def train_joint(pairs_path: str | Path, config: TrainingConfig,
                out_dir: str | Path, run_id: str | None = None,
                model=None, vocab: Vocabulary | None = None) -> TrainResult:
    """Optimize one model on the mixed query/response stream, writing a
    checkpoint per epoch under {out_dir}/{run_id}/epoch_{k}/ and early
    stopping on validation loss."""
    pairs = load_pairs(pairs_path)
    return _train(pairs, config, out_dir, run_id or "joint", model, vocab)


def train_relevance(examples, config: TrainingConfig, out_dir: str | Path,
                    run_id: str | None = None, model=None,
                    vocab: Vocabulary | None = None) -> TrainResult:
    """Fine-tune the relevance head: each (query, record, label) example
    becomes a seq2seq pair whose target is the single label token."""
    if isinstance(examples, (str, Path)):
        raw = load_pairs(examples)
        examples = [
            {"query": p["prompt"], "record": "", "label": p["target"]} for p in raw
        ]
    pairs = []
    labels_seen = set()
    for i, ex in enumerate(examples):
        label = ex.get("label")
        if label not in (MATCHED, MISMATCHED):
            raise DataError(f"example {i}: label must be {MATCHED} or "
                            f"{MISMATCHED}, got {label!r}")
        labels_seen.add(label)
        pairs.append({
            "task": "relevance",
            "prompt": RELEVANCE_PROMPT.format(
                query=ex.get("query", ""), record=ex.get("record", "")
            ),
            "target": label,
        })
    if not pairs:
        raise DataError("no relevance examples supplied")
    if len(labels_seen) < 2:
        warnings.warn(
            f"relevance training data is single-class ({labels_seen}); "
            "the model will never learn the other label",
            stacklevel=2,
        )
    return _train(pairs, config, out_dir, run_id or "relevance", model, vocab)


def relevance_accuracy(model, vocab: Vocabulary, examples) -> float:
    hits = 0
    for ex in examples:
        label, _ = relevance_of(model, vocab, ex.get("query", ""), ex.get("record", ""))
        hits += label == ex["label"]
    return hits / len(examples)


def _train(pairs: list[dict], config: TrainingConfig, out_dir: str | Path,
           run_id: str, model, vocab: Vocabulary | None) -> TrainResult:
    rng = random.Random(config.seed)
    torch.manual_seed(config.seed)

    if vocab is None:
        vocab = Vocabulary.build(
            [p["prompt"] for p in pairs] + [p["target"] for p in pairs]
        )
    if model is None:
        model = build_model(len(vocab), config.spec, seed=config.seed)

    order = list(range(len(pairs)))
    rng.shuffle(order)
    n_val = int(len(pairs) * config.validation_fraction)
    val = [pairs[i] for i in order[:n_val]]
    train = [pairs[i] for i in order[n_val:]]
    if not train:
        train, val = val, []

    optimizer = torch.optim.AdamW(model.parameters(), lr=config.learning_rate)
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, _lr_lambda(config))

    run_dir = Path(out_dir) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    history: list[EpochStats] = []
    best_val = math.inf
    best_epoch = 0
    since_best = 0
    stopped_early = False

    for epoch in range(1, config.epochs + 1):
        train_loss = _epoch_loss(
            model, vocab, train, config, optimizer, scheduler, rng
        )
        # without a held-out slice the training loss stands in, which
        # disables meaningful early stopping but keeps the loop total
        val_loss = _epoch_loss(model, vocab, val, config) if val else train_loss
        history.append(EpochStats(epoch, train_loss, val_loss))
        save_checkpoint(
            model, vocab, run_dir / f"epoch_{epoch}",
            extra={"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss},
        )
        if val_loss < best_val:
            best_val, best_epoch, since_best = val_loss, epoch, 0
        else:
            since_best += 1
            if config.early_stop and since_best >= config.patience:
                stopped_early = True
                break

    summary = {
        "run_id": run_id,
        "best_epoch": best_epoch,
        "stopped_early": stopped_early,
        "history": [vars(h) for h in history],
        "config": {
            k: (v if not isinstance(v, ModelSpec) else vars(v))
            for k, v in vars(config).items()
        },
    }
    (run_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8"
    )
    return TrainResult(
        run_id=run_id, run_dir=run_dir, history=tuple(history),
        best_epoch=best_epoch, stopped_early=stopped_early,
    )


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(
        description="Fine-tune the serving model on exported training pairs."
    )
    parser.add_argument("pairs", help="JSON-lines file of task/prompt/target pairs")
    parser.add_argument("--out", required=True, help="checkpoint root directory")
    parser.add_argument("--run-id", default="joint")
    parser.add_argument("--epochs", type=int, default=50)
    parser.add_argument("--batch-size", type=int, default=128)
    parser.add_argument("--learning-rate", type=float, default=3e-5)
    parser.add_argument("--warmup", choices=WARMUP_SCHEDULES, default="noam")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--no-early-stop", action="store_true")
    args = parser.parse_args(argv)

    config = TrainingConfig(
        learning_rate=args.learning_rate,
        batch_size=args.batch_size,
        epochs=args.epochs,
        warmup=args.warmup,
        seed=args.seed,
        early_stop=not args.no_early_stop,
    )
    result = train_joint(args.pairs, config, args.out, run_id=args.run_id)
    final = result.history[-1]
    print(
        f"run {result.run_id}: {len(result.history)} epochs, best epoch "
        f"{result.best_epoch} (val loss {min(h.val_loss for h in result.history):.4f}), "
        f"final train loss {final.train_loss:.4f}"
    )


if __name__ == "__main__":
    main()
