"""Knowledge-tracing models: training loop, difficulty inference, checkpoints.

Three interaction encodings share one decoder architecture:

  text   full question words plus answers, one sequence per student
  qid    opaque question ids plus answers (the classic DKT shape)
  qonly  each question alone, no student state at all

Predicted difficulty for (student, question) is the next-token probability
of <Y> at the answer slot, renormalized against <N>; the raw probabilities
ride along for diagnostics.
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import decoder
from .corpus import (NO, YES, CorpusError, Question, QuestionIdRegistry,
                     StudentHistory, Vocab, encode_id_state, encode_kt_example,
                     encode_question, encode_student_state, truncate_context)

KINDS = ("text", "qid", "qonly")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-3
    clip_norm: float = 1.0
    log_every: int = 50
    seed: int = 0
    answers_only: bool = False  # restrict the loss mask to <Y>/<N> transitions


@dataclass(frozen=True)
class DifficultyPrediction:
    d: float        # p(<Y>) / (p(<Y>) + p(<N>)) at the answer slot
    p_yes: float
    p_no: float


@dataclass
class KT:
    kind: str
    model: decoder.Model
    vocab: Vocab | None = None
    registry: QuestionIdRegistry | None = None
    context_limit: int = 0
    training_meta: dict = field(default_factory=dict)


def new_kt(kind: str, vocab: Vocab | None = None,
           registry: QuestionIdRegistry | None = None,
           context_limit: int | None = None, **model_kwargs) -> KT:
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    if kind == "qid":
        if registry is None:
            raise ValueError("qid models need a QuestionIdRegistry")
        # size the embedding to full capacity so late registrations fit
        vocab_size = registry.capacity + QuestionIdRegistry.UNK + 1
    else:
        if vocab is None:
            raise ValueError(f"{kind} models need a Vocab")
        vocab_size = vocab.size
    config = decoder.ModelConfig(vocab_size=vocab_size, **model_kwargs)
    limit = min(context_limit or config.max_seq, config.max_seq)
    return KT(kind, decoder.init_model(config), vocab, registry, limit)


# ---------------------------------------------------------------------------
# dataset encoding


Example = tuple[list[int], list[bool]]


def _mask_for(tokens: Sequence[int], answers_only: bool) -> list[bool]:
    if not answers_only:
        return [True] * (len(tokens) - 1)
    return [tokens[t + 1] in (YES, NO) for t in range(len(tokens) - 1)]


@dataclass
class KTDataset:
    kind: str
    examples: list[Example]


def build_kt_dataset(kt: KT, histories: Sequence[StudentHistory],
                     answers_only: bool = False,
                     limit: int | None = None) -> KTDataset:
    """Pre-encode histories once; training then only indexes into this."""
    limit = limit or kt.context_limit or kt.model.config.max_seq
    examples: list[Example] = []
    if kt.kind == "text":
        for h in histories:
            tokens, _ = encode_kt_example(kt.vocab, h)
            tokens = truncate_context(tokens, limit)
            examples.append((tokens, _mask_for(tokens, answers_only)))
    elif kt.kind == "qonly":
        for h in histories:
            for it in h.interactions:
                tokens = encode_question(kt.vocab, it.question)
                tokens.append(YES if it.correct else NO)
                examples.append((tokens, _mask_for(tokens, answers_only)))
    else:
        for h in histories:
            tokens = encode_id_state(kt.registry, h, register=True)
            tokens = _truncate_id_state(tokens, limit)
            # question ids arrive uniformly at random; only answers carry signal
            examples.append((tokens, _mask_for(tokens, answers_only=True)))
    if not examples:
        raise CorpusError("dataset is empty")
    return KTDataset(kt.kind, examples)


def _truncate_id_state(tokens: list[int], limit: int) -> list[int]:
    if len(tokens) <= limit:
        return tokens
    cut = len(tokens) - limit
    cut += cut % 2  # keep (qid, answer) pairs intact
    return tokens[cut:]


# ---------------------------------------------------------------------------
# the shared training loop (question generation reuses it)


@dataclass
class TrainResult:
    steps_run: int
    final_loss: float
    loss_rows: list[tuple[int, float]]


LossFn = Callable[[int], tuple[ad.Tensor, int]]


def run_training(params: Sequence[ad.Tensor], n_examples: int, loss_fn: LossFn,
                 cfg: TrainConfig, adam: ad.Adam | None = None,
                 start_step: int = 0, loss_csv: str | Path | None = None,
                 checkpoint_fn: Callable[[int, ad.Adam], None] | None = None,
                 checkpoint_every: int = 0) -> TrainResult:
    """Seeded minibatch Adam loop over pre-encoded examples.

    Batch composition at step t depends only on (cfg.seed, t), so training
    resumed from a checkpoint replays the exact remaining batch sequence.
    loss_fn(i) returns the mean loss for example i plus its transition
    count; the batch loss is the transition-weighted mean, which matches
    concatenating the masked transitions of the whole batch.
    """
    if adam is None:
        adam = ad.Adam(params, lr=cfg.lr)
    rows: list[tuple[int, float]] = []
    writer = None
    fh = None
    if loss_csv is not None:
        fresh = start_step == 0 or not Path(loss_csv).exists()
        fh = open(loss_csv, "w" if fresh else "a", newline="", encoding="utf-8")
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(["step", "loss"])
    loss_val = float("nan")
    try:
        for step in range(start_step, cfg.steps):
            rng = np.random.default_rng([cfg.seed, step])
            k = min(cfg.batch_size, n_examples)
            idx = rng.choice(n_examples, size=k, replace=False)
            total: ad.Tensor | None = None
            denom = 0
            for i in idx:
                loss_i, count_i = loss_fn(int(i))
                term = ad.scale(loss_i, float(count_i))
                total = term if total is None else ad.add(total, term)
                denom += count_i
            loss = ad.scale(total, 1.0 / denom)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise TrainingDivergedError(f"non-finite loss at step {step}")
            for p in params:
                p.zero_grad()
            ad.backward(loss)
            ad.clip_grad_norm(params, cfg.clip_norm)
            adam.step()
            if step % cfg.log_every == 0 or step == cfg.steps - 1:
                rows.append((step, loss_val))
                if writer is not None:
                    writer.writerow([step, f"{loss_val:.6f}"])
                    fh.flush()
            if (checkpoint_fn is not None and checkpoint_every > 0
                    and (step + 1) % checkpoint_every == 0):
                checkpoint_fn(step + 1, adam)
    finally:
        if fh is not None:
            fh.close()
    steps_run = max(cfg.steps - start_step, 0)
    if checkpoint_fn is not None and steps_run > 0:
        checkpoint_fn(cfg.steps, adam)
    return TrainResult(steps_run, loss_val, rows)


def train_kt(kt: KT, dataset: KTDataset, cfg: TrainConfig,
             ckpt_dir: str | Path | None = None, checkpoint_every: int = 0,
             loss_csv: str | Path | None = None, adam: ad.Adam | None = None,
             start_step: int = 0) -> TrainResult:
    examples = dataset.examples

    def loss_fn(i: int) -> tuple[ad.Tensor, int]:
        tokens, mask = examples[i]
        return decoder.sequence_loss(kt.model, tokens, mask), sum(mask)

    kt.training_meta = {"steps": cfg.steps, "lr": cfg.lr, "seed": cfg.seed}

    checkpoint_fn = None
    if ckpt_dir is not None:
        def checkpoint_fn(step: int, opt: ad.Adam) -> None:
            save_kt(ckpt_dir, kt, opt, step, cfg)

    return run_training(kt.model.parameters(), len(examples), loss_fn, cfg,
                        adam=adam, start_step=start_step, loss_csv=loss_csv,
                        checkpoint_fn=checkpoint_fn,
                        checkpoint_every=checkpoint_every)


# ---------------------------------------------------------------------------
# difficulty inference


def _prediction_tokens(kt: KT, history: StudentHistory, question: Question,
                       limit: int) -> list[int]:
    if kt.kind == "qid":
        state = encode_id_state(kt.registry, history)
        state = _truncate_id_state(state, limit - 1)
        return state + [kt.registry.lookup(question)]
    q_tokens = encode_question(kt.vocab, question)
    if len(q_tokens) > limit:
        raise CorpusError(f"question needs {len(q_tokens)} tokens, limit is {limit}")
    if kt.kind == "qonly":
        return q_tokens
    state = encode_student_state(kt.vocab, history)
    return truncate_context(state + q_tokens, limit)


def predict_difficulty(kt: KT, history: StudentHistory, question: Question,
                       max_tokens: int | None = None) -> DifficultyPrediction:
    limit = min(max_tokens or kt.context_limit or kt.model.config.max_seq,
                kt.model.config.max_seq)
    tokens = _prediction_tokens(kt, history, question, limit)
    dist = decoder.next_token_distribution(kt.model, tokens)
    p_yes = float(dist[YES])
    p_no = float(dist[NO])
    return DifficultyPrediction(p_yes / (p_yes + p_no), p_yes, p_no)


def predict_batch(kt: KT, instances: Sequence[tuple[StudentHistory, Question]],
                  max_tokens: int | None = None
                  ) -> tuple[list[DifficultyPrediction], float]:
    """Sequential scoring; returns predictions and wall-clock seconds."""
    t0 = time.perf_counter()
    preds = []
    for i, (h, q) in enumerate(instances):
        try:
            preds.append(predict_difficulty(kt, h, q, max_tokens))
        except Exception as e:
            raise type(e)(f"pair {i}: {e}") from e
    return preds, time.perf_counter() - t0


# ---------------------------------------------------------------------------
# checkpoints: model weights plus optimizer state plus the encoders


def save_kt(ckpt_dir: str | Path, kt: KT, adam: ad.Adam | None = None,
            step: int = 0, train_cfg: TrainConfig | None = None) -> None:
    tensors = {name: p.data for name, p in kt.model.named_parameters()}
    if adam is not None:
        for (name, _), m, v in zip(kt.model.named_parameters(), adam.m, adam.v):
            tensors["opt.m." + name] = m
            tensors["opt.v." + name] = v
    fields = {
        "config": asdict(kt.model.config),
        "seed": kt.model.config.seed,
        "kind": kt.kind,
        "vocab": kt.vocab.to_json() if kt.vocab is not None else None,
        "registry": kt.registry.to_json() if kt.registry is not None else None,
        "context_limit": kt.context_limit,
        "training_meta": kt.training_meta,
        "step": step,
        "adam": None if adam is None else {"lr": adam.lr, "step_count": adam.step_count},
        "train_config": None if train_cfg is None else asdict(train_cfg),
    }
    decoder.write_tensors(ckpt_dir, tensors, fields)


def _restore_model(tensors: dict[str, np.ndarray], manifest: dict) -> decoder.Model:
    config = decoder.ModelConfig(**manifest["config"])
    template = decoder.init_model(config)
    params: dict[str, ad.Tensor] = {}
    for name, t in template.params.items():
        if name not in tensors:
            raise decoder.CheckpointError(f"checkpoint missing tensor '{name}'")
        if tensors[name].shape != t.shape:
            raise decoder.CheckpointError(
                f"tensor '{name}' has shape {tensors[name].shape}, expected {t.shape}")
        params[name] = ad.Tensor(tensors[name], requires_grad=True)
    return decoder.Model(config, params)


def load_kt(ckpt_dir: str | Path) -> KT:
    tensors, manifest = decoder.read_tensors(ckpt_dir)
    model = _restore_model(tensors, manifest)
    vocab = Vocab.from_json(manifest["vocab"]) if manifest.get("vocab") else None
    registry = (QuestionIdRegistry.from_json(manifest["registry"])
                if manifest.get("registry") else None)
    return KT(manifest["kind"], model, vocab, registry,
              manifest.get("context_limit") or model.config.max_seq,
              manifest.get("training_meta") or {})


def load_kt_training(ckpt_dir: str | Path) -> tuple[KT, ad.Adam, int, TrainConfig]:
    """Rebuild everything a resumed run needs: model, optimizer, step, config."""
    tensors, manifest = decoder.read_tensors(ckpt_dir)
    kt_bundle = load_kt(ckpt_dir)
    if manifest.get("adam") is None:
        raise decoder.CheckpointError("checkpoint has no optimizer state to resume")
    adam = ad.Adam(kt_bundle.model.parameters(), lr=manifest["adam"]["lr"])
    adam.step_count = manifest["adam"]["step_count"]
    names = [name for name, _ in kt_bundle.model.named_parameters()]
    try:
        adam.m = [tensors["opt.m." + n].copy() for n in names]
        adam.v = [tensors["opt.v." + n].copy() for n in names]
    except KeyError as e:
        raise decoder.CheckpointError(f"checkpoint missing optimizer tensor {e}")
    if manifest.get("train_config") is None:
        raise decoder.CheckpointError("checkpoint has no training config to resume")
    cfg = TrainConfig(**manifest["train_config"])
    return kt_bundle, adam, manifest["step"], cfg
