"""Multi-task training loop.

Tasks are drawn with temperature-scaled probabilities q_t proportional
to p_t^(1/T), p_t = N_t / sum N, then one homogeneous batch is taken
from that task's shuffled stream (task routing is per-forward-pass
instance state, so batches never mix tasks). The loss is the task
weight times the mean token cross-entropy of the target sequence, and
the optimizer only ever sees the hypernetwork plus the host layer
norms; everything else stays frozen.

Checkpoints are written every ``checkpoint_every`` steps (atomically,
write-temp-then-rename) with the optimizer and all sampler RNG streams,
so a run can be resumed mid-flight and continue on the exact same batch
sequence. Model selection picks the checkpoint with the lowest mean
validation loss across tasks, ties broken by the earliest step.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .codec import SentTPair
from .errors import ConfigError, TrainingDivergedError
from .host import PAD_ID, Seq2SeqBatch, Vocabulary, make_seq2seq_batch
from .hypernet import export_state, import_state
from .peft import Instrumentation

ALLOWED_FRACTIONS = (0.1, 0.2, 1.0)


@dataclass(frozen=True)
class TrainerConfig:
    learning_rate: float = 3e-4
    batch_size: int = 32
    total_steps: int = 2 ** 18
    checkpoint_every: int = 1000
    temperature: float = 10.0
    seed: int = 0
    low_resource_fraction: float = 1.0
    task_weights: dict[str, float] | None = None  # defaults to 1.0 per task

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.total_steps < 1:
            raise ConfigError("learning_rate, batch_size and total_steps must be positive")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        if self.temperature < 1:
            raise ConfigError(f"temperature must be >= 1, got {self.temperature}")
        if self.low_resource_fraction not in ALLOWED_FRACTIONS:
            raise ConfigError(
                f"low_resource_fraction must be one of {ALLOWED_FRACTIONS}"
            )
        if self.task_weights is not None and any(w < 0 for w in self.task_weights.values()):
            raise ConfigError("task weights must be non-negative")

    def weight_for(self, task: str) -> float:
        if self.task_weights is None:
            return 1.0
        return float(self.task_weights.get(task, 1.0))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "TrainerConfig":
        return cls(**json.loads(text))


def sampling_probs(sizes: Sequence[int], temperature: float) -> np.ndarray:
    """q_t = p_t^(1/T) / sum_i p_i^(1/T) with p_t = N_t / sum N."""
    if len(sizes) == 0:
        raise ConfigError("no tasks to sample from")
    if any(s <= 0 for s in sizes):
        raise ConfigError(f"task sizes must be positive, got {list(sizes)}")
    if temperature < 1:
        raise ConfigError(f"temperature must be >= 1, got {temperature}")
    p = np.asarray(sizes, dtype=np.float64)
    p = p / p.sum()
    if temperature == 1:
        return p
    q = p ** (1.0 / temperature)
    return q / q.sum()


class TaskSampler:
    """Seeded categorical draws over the temperature-scaled task distribution."""

    def __init__(self, sizes: Sequence[int], temperature: float, seed: int):
        self.probs = sampling_probs(sizes, temperature)
        self._cdf = np.cumsum(self.probs)
        self._rng = random.Random(f"{seed}:task_sampler")

    def draw(self) -> int:
        return int(np.searchsorted(self._cdf, self._rng.random(), side="right"))

    def state(self):
        return self._rng.getstate()

    def load_state(self, state) -> None:
        self._rng.setstate(state)


class ExampleStream:
    """Per-task shuffled stream; reshuffles at every epoch boundary."""

    def __init__(self, examples: Sequence, seed_key: str):
        if not examples:
            raise ConfigError("cannot stream from an empty example list")
        self.examples = list(examples)
        self._rng = random.Random(seed_key)
        self._order = list(range(len(self.examples)))
        self._rng.shuffle(self._order)
        self._cursor = 0

    def next_batch(self, batch_size: int) -> list:
        out = []
        while len(out) < batch_size:
            if self._cursor >= len(self._order):
                self._rng.shuffle(self._order)
                self._cursor = 0
            out.append(self.examples[self._order[self._cursor]])
            self._cursor += 1
        return out

    def state(self):
        return {"rng": self._rng.getstate(), "order": list(self._order), "cursor": self._cursor}

    def load_state(self, state) -> None:
        self._rng.setstate(state["rng"])
        self._order = list(state["order"])
        self._cursor = state["cursor"]


def next_batch(
    sampler: TaskSampler, streams: Sequence[ExampleStream], batch_size: int
) -> tuple[int, list]:
    """Draw a task, then a homogeneous batch from that task's stream."""
    task_index = sampler.draw()
    return task_index, streams[task_index].next_batch(batch_size)


def sequence_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean token-level cross-entropy over non-pad target positions."""
    return F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=PAD_ID
    )


def batch_fingerprint(batch: Seq2SeqBatch) -> str:
    digest = hashlib.sha256()
    for tensor in (batch.src_ids, batch.dec_input_ids, batch.target_ids):
        digest.update(tensor.numpy().tobytes())
    return digest.hexdigest()[:16]


def train_step(
    instrumentation: Instrumentation,
    optimizer: torch.optim.Optimizer,
    batch: Seq2SeqBatch,
    task_index: int,
    weight: float = 1.0,
    step: int | None = None,
    task_name: str | None = None,
) -> float:
    instrumentation.set_active_task(task_index)
    host = instrumentation.host
    host.train()
    logits = host(batch.src_ids, batch.src_mask, batch.dec_input_ids)
    loss = weight * sequence_cross_entropy(logits, batch.target_ids)
    if not torch.isfinite(loss):
        raise TrainingDivergedError(
            f"non-finite loss at step {step} on task {task_name!r}",
            step=step, task=task_name, batch_hash=batch_fingerprint(batch),
        )
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


@dataclass(frozen=True)
class CheckpointRecord:
    step: int
    val_losses: dict[str, float]
    mean_val_loss: float
    path: str

    def to_json_line(self) -> str:
        return json.dumps(
            {"step": self.step, "val_losses": self.val_losses,
             "mean_val_loss": self.mean_val_loss, "path": self.path},
            sort_keys=True,
        )

    @classmethod
    def from_json_line(cls, line: str) -> "CheckpointRecord":
        obj = json.loads(line)
        return cls(step=int(obj["step"]),
                   val_losses={k: float(v) for k, v in obj["val_losses"].items()},
                   mean_val_loss=float(obj["mean_val_loss"]),
                   path=obj["path"])


def select_best(records: Sequence[CheckpointRecord]) -> CheckpointRecord:
    """Lowest mean validation loss; earliest step wins ties."""
    if not records:
        raise ConfigError("no checkpoint records to select from")
    return min(records, key=lambda r: (r.mean_val_loss, r.step))


@dataclass
class TaskData:
    name: str
    train: list[SentTPair]
    val: list[SentTPair]


def _atomic_save(obj, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    torch.save(obj, tmp)
    os.replace(tmp, path)


class MultitaskTrainer:

    def __init__(
        self,
        instrumentation: Instrumentation,
        vocab: Vocabulary,
        tasks: Sequence[TaskData],
        config: TrainerConfig,
        out_dir,
        shared_task_embedding: bool = False,
    ):
        """``shared_task_embedding`` routes every task through embedding index 0,
        the no-task-conditioning ablation."""
        if not tasks:
            raise ConfigError("no tasks given")
        self.shared_task_embedding = shared_task_embedding
        names = [t.name for t in tasks]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate task names: {names}")
        self.instrumentation = instrumentation
        self.vocab = vocab
        self.tasks = sorted(tasks, key=lambda t: t.name)  # index = lexicographic rank
        if len(self.tasks) > instrumentation.hypernet.config.n_tasks:
            raise ConfigError(
                f"{len(self.tasks)} tasks but the hypernetwork embeds only "
                f"{instrumentation.hypernet.config.n_tasks}"
            )
        for task in self.tasks:
            if not task.train:
                raise ConfigError(f"task {task.name!r} has no training examples")
        self.config = config
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / "config.json").write_text(self._config_payload(), encoding="utf-8")

        self.sampler = TaskSampler(
            [len(t.train) for t in self.tasks], config.temperature, config.seed
        )
        self.streams = [
            ExampleStream(t.train, f"{config.seed}:{t.name}") for t in self.tasks
        ]
        self.optimizer = torch.optim.Adam(
            list(instrumentation.trainable_parameters()), lr=config.learning_rate
        )
        self.step = 0
        self.records: list[CheckpointRecord] = []
        self.loss_history: list[tuple[int, str, float]] = []

    def _config_payload(self) -> str:
        payload = {
            "trainer": json.loads(self.config.to_json()),
            "task_names": [t.name for t in self.tasks],
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    def routing_index(self, task_index: int) -> int:
        return 0 if self.shared_task_embedding else task_index

    # -- evaluation of validation loss --------------------------------------

    @torch.no_grad()
    def validation_loss(self, task_index: int, batch_size: int = 64) -> float:
        """Mean per-token cross-entropy over the task's full validation set."""
        task = self.tasks[task_index]
        if not task.val:
            return float("nan")
        host = self.instrumentation.host
        was_training = host.training
        host.eval()
        self.instrumentation.set_active_task(self.routing_index(task_index))
        total_nll, total_tokens = 0.0, 0
        try:
            for start in range(0, len(task.val), batch_size):
                batch = make_seq2seq_batch(self.vocab, task.val[start:start + batch_size])
                logits = host(batch.src_ids, batch.src_mask, batch.dec_input_ids)
                nll = F.cross_entropy(
                    logits.reshape(-1, logits.shape[-1]),
                    batch.target_ids.reshape(-1),
                    ignore_index=PAD_ID,
                    reduction="sum",
                )
                total_nll += float(nll)
                total_tokens += int((batch.target_ids != PAD_ID).sum())
        finally:
            if was_training:
                host.train()
        return total_nll / max(total_tokens, 1)

    def _mean_validation_loss(self) -> tuple[dict[str, float], float]:
        losses = {
            task.name: self.validation_loss(i) for i, task in enumerate(self.tasks)
        }
        finite = [v for v in losses.values() if v == v]  # drop NaN from val-less tasks
        mean = sum(finite) / len(finite) if finite else float("nan")
        return losses, mean

    # -- checkpointing -------------------------------------------------------

    def _checkpoint_dir(self, step: int) -> Path:
        return self.out_dir / f"step_{step:08d}"

    def save_checkpoint(self) -> CheckpointRecord:
        ckpt = self._checkpoint_dir(self.step)
        ckpt.mkdir(parents=True, exist_ok=True)
        _atomic_save(export_state(self.instrumentation.hypernet), ckpt / "hypernet.pt")
        _atomic_save(
            {name: t.detach().clone()
             for name, t in self.instrumentation.trainable_host_tensors().items()},
            ckpt / "host_layer_norms.pt",
        )
        _atomic_save(self.optimizer.state_dict(), ckpt / "optimizer.pt")
        _atomic_save(
            {
                "step": self.step,
                "sampler": self.sampler.state(),
                "streams": [s.state() for s in self.streams],
                "torch_rng": torch.get_rng_state(),
            },
            ckpt / "sampler.pt",
        )
        (ckpt / "config.json").write_text(self._config_payload(), encoding="utf-8")

        val_losses, mean = self._mean_validation_loss()
        record = CheckpointRecord(
            step=self.step, val_losses=val_losses, mean_val_loss=mean, path=str(ckpt)
        )
        self.records.append(record)
        with open(self.out_dir / "records.jsonl", "a", encoding="utf-8") as fh:
            fh.write(record.to_json_line() + "\n")
        return record

    def restore(self, checkpoint_dir) -> None:
        """Load model, optimizer and sampler state saved by ``save_checkpoint``."""
        ckpt = Path(checkpoint_dir)
        import_state(self.instrumentation.hypernet, torch.load(ckpt / "hypernet.pt",
                                                               weights_only=True))
        host_tensors = torch.load(ckpt / "host_layer_norms.pt", weights_only=True)
        current = dict(self.instrumentation.host.named_parameters())
        with torch.no_grad():
            for name, tensor in host_tensors.items():
                current[name].copy_(tensor)
        self.optimizer.load_state_dict(torch.load(ckpt / "optimizer.pt", weights_only=False))
        sampler_state = torch.load(ckpt / "sampler.pt", weights_only=False)
        self.step = int(sampler_state["step"])
        self.sampler.load_state(sampler_state["sampler"])
        for stream, state in zip(self.streams, sampler_state["streams"]):
            stream.load_state(state)
        torch.set_rng_state(sampler_state["torch_rng"])
        records_file = self.out_dir / "records.jsonl"
        if records_file.exists():
            self.records = [
                CheckpointRecord.from_json_line(line)
                for line in records_file.read_text(encoding="utf-8").splitlines()
                if line.strip() and json.loads(line)["step"] <= self.step
            ]

    # -- the loop -------------------------------------------------------------

    def fit(self) -> CheckpointRecord:
        cfg = self.config
        while self.step < cfg.total_steps:
            self.step += 1
            task_index, pairs = next_batch(self.sampler, self.streams, cfg.batch_size)
            batch = make_seq2seq_batch(self.vocab, pairs)
            task = self.tasks[task_index]
            loss = train_step(
                self.instrumentation, self.optimizer, batch, self.routing_index(task_index),
                weight=cfg.weight_for(task.name), step=self.step, task_name=task.name,
            )
            self.loss_history.append((self.step, task.name, loss))
            if self.step % cfg.checkpoint_every == 0 or self.step == cfg.total_steps:
                if not any(r.step == self.step for r in self.records):
                    self.save_checkpoint()
        return select_best(self.records)
