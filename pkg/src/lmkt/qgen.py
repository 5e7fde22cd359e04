"""Difficulty-controlled question generation.

A second decoder is trained on sequences [student state, c_d, <G>, question]
where c_d = d*w + b is a learned affine image of the scalar target difficulty,
injected by replacing the embedding at the control slot. The loss covers only
the transitions from <G> onward, so the state conditions but is never scored.
Decoding is nucleus sampling with an optional CTRL-style repetition penalty;
the question's own <A> suffix doubles as the stop token.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import decoder
from .corpus import (A_TOK, GEN, PAD, Question, StudentHistory, Vocab,
                     encode_qg_example, encode_question, truncate_context)
from .ktrain import KT, TrainConfig, TrainResult, predict_difficulty, run_training


class QGenError(ValueError):
    pass


class ControlRangeError(QGenError):
    pass


class GenerationError(RuntimeError):
    """The sampler produced no word tokens before stopping."""


@dataclass(frozen=True)
class QGExample:
    state: StudentHistory
    d: float
    question: Question
    t_g: int | None = None          # index of <G>, filled in at encoding
    answer: bool | None = None      # recorded correctness, when the pair was real

    def __post_init__(self):
        if not 0.0 <= self.d <= 1.0:
            raise QGenError(f"difficulty {self.d} outside [0, 1]")


class ControlProjection:
    """c_d = d*w + b; with affine=False the bias stays pinned at zero."""

    def __init__(self, d_model: int, seed: int = 0, affine: bool = True):
        rng = np.random.default_rng([seed, 7])
        self.affine = affine
        self.w = ad.Tensor(rng.normal(0.0, 0.02, size=d_model), requires_grad=True)
        self.b = ad.Tensor(np.zeros(d_model), requires_grad=affine)

    def vector(self, d: float) -> ad.Tensor:
        if not 0.0 <= d <= 1.0:
            raise ControlRangeError(f"control difficulty {d} outside [0, 1]")
        v = ad.scale(self.w, float(d))
        return ad.add(v, self.b) if self.affine else v

    def parameters(self) -> list[ad.Tensor]:
        return [self.w, self.b] if self.affine else [self.w]


@dataclass(frozen=True)
class SamplingParams:
    top_p: float = 0.99
    max_new_tokens: int = 20
    repetition_penalty: float = 1.0   # 1 disables; 1.2 is the usual setting
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.top_p <= 1.0:
            raise QGenError("top_p must lie in (0, 1]")
        if self.max_new_tokens < 1:
            raise QGenError("max_new_tokens must be >= 1")
        if self.repetition_penalty < 1.0:
            raise QGenError("repetition_penalty must be >= 1")
        if self.temperature <= 0.0:
            raise QGenError("temperature must be > 0")


@dataclass
class QG:
    model: decoder.Model
    vocab: Vocab
    control: ControlProjection
    context_limit: int

    def parameters(self) -> list[ad.Tensor]:
        return self.model.parameters() + self.control.parameters()


def new_qg(vocab: Vocab, affine: bool = True, context_limit: int | None = None,
           **model_kwargs) -> QG:
    config = decoder.ModelConfig(vocab_size=vocab.size, **model_kwargs)
    limit = min(context_limit or config.max_seq, config.max_seq)
    control = ControlProjection(config.d_model, seed=config.seed, affine=affine)
    return QG(decoder.init_model(config), vocab, control, limit)


# ---------------------------------------------------------------------------
# dataset construction


def prefix_states(histories: Sequence[StudentHistory], per_student: int,
                  seed: int = 0, min_len: int = 1) -> list[StudentHistory]:
    """Random history prefixes, so states cover many context lengths."""
    rng = np.random.default_rng([seed, 11])
    out: list[StudentHistory] = []
    for h in histories:
        n = len(h.interactions)
        if n < min_len:
            continue
        lengths = rng.integers(min_len, n + 1, size=per_student)
        for ln in lengths:
            out.append(StudentHistory(f"{h.student_id}@{int(ln)}",
                                      h.interactions[:int(ln)]))
    return out


def build_qg_dataset(kt: KT, states: Sequence[StudentHistory],
                     question_pool: Sequence[Question], pairs_per_state: int = 1,
                     seed: int = 0) -> list[QGExample]:
    """Pair states with pool questions uniformly; d is the KT-predicted difficulty."""
    if not question_pool:
        raise QGenError("question pool is empty")
    rng = np.random.default_rng([seed, 13])
    out: list[QGExample] = []
    for state in states:
        for q_idx in rng.integers(len(question_pool), size=pairs_per_state):
            q = question_pool[int(q_idx)]
            d = predict_difficulty(kt, state, q).d
            out.append(QGExample(state, d, q))
    return out


def next_question_examples(histories: Sequence[StudentHistory], per_student: int,
                           seed: int = 0, kt: KT | None = None) -> list[QGExample]:
    """(prefix, actually-posed next question) pairs with the recorded answer.

    d is the KT-scored difficulty when a model is given, else the binary
    answer; either way the answer rides along so target kinds can be swapped.
    """
    rng = np.random.default_rng([seed, 17])
    out: list[QGExample] = []
    for h in histories:
        n = len(h.interactions)
        if n < 2:
            continue
        k = min(per_student, n - 1)
        positions = rng.choice(np.arange(1, n), size=k, replace=False)
        for i in sorted(int(p) for p in positions):
            state = StudentHistory(f"{h.student_id}@{i}", h.interactions[:i])
            nxt = h.interactions[i]
            d = (predict_difficulty(kt, state, nxt.question).d if kt is not None
                 else float(nxt.correct))
            out.append(QGExample(state, d, nxt.question, answer=nxt.correct))
    return out


def with_binary_targets(examples: Sequence[QGExample]) -> list[QGExample]:
    """Swap each example's d for its recorded answer (1 correct, 0 incorrect)."""
    out = []
    for ex in examples:
        if ex.answer is None:
            raise QGenError(f"example for {ex.state.student_id} has no recorded answer")
        out.append(QGExample(ex.state, float(ex.answer), ex.question,
                             ex.t_g, ex.answer))
    return out


def write_qg_dataset(path: str | Path, examples: Sequence[QGExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            rec = {
                "student_id": ex.state.student_id,
                "state": [[it.question.text, it.correct] for it in ex.state.interactions],
                "d": ex.d,
                "question": ex.question.text,
                "answer": ex.answer,
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_qg_dataset(path: str | Path) -> list[QGExample]:
    from .corpus import Interaction
    out: list[QGExample] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            state = StudentHistory(rec["student_id"], tuple(
                Interaction(Question.from_text(t), bool(c)) for t, c in rec["state"]))
            out.append(QGExample(state, rec["d"], Question.from_text(rec["question"]),
                                 answer=rec.get("answer")))
    return out


# ---------------------------------------------------------------------------
# training


EncodedQG = tuple[list[int], int, list[bool], float]


def encode_examples(qg: QG, examples: Sequence[QGExample]) -> list[EncodedQG]:
    """Token sequences with the control slot index; long states are trimmed
    from the front on question boundaries so the suffix structure survives."""
    out: list[EncodedQG] = []
    for ex in examples:
        enc = encode_qg_example(qg.vocab, ex.state, ex.question)
        tokens = enc.tokens
        control_position = enc.control_position
        if len(tokens) > qg.context_limit:
            tail_len = len(tokens) - control_position  # control + <G> + question
            state_tokens = truncate_context(tokens[:control_position],
                                            qg.context_limit - tail_len)
            control_position = len(state_tokens)
            tokens = state_tokens + tokens[len(enc.tokens) - tail_len:]
        t_g = control_position + 1
        mask = [t >= t_g for t in range(len(tokens) - 1)]
        out.append((tokens, control_position, mask, ex.d))
    return out


def train_qg(qg: QG, examples: Sequence[QGExample], cfg: TrainConfig,
             ckpt_dir: str | Path | None = None, checkpoint_every: int = 0,
             loss_csv: str | Path | None = None, adam: ad.Adam | None = None,
             start_step: int = 0) -> TrainResult:
    if not examples:
        raise QGenError("cannot train on an empty dataset")
    encoded = encode_examples(qg, examples)
    params = qg.parameters()

    def loss_fn(i: int) -> tuple[ad.Tensor, int]:
        tokens, control_position, mask, d = encoded[i]
        vec = qg.control.vector(d)
        loss = decoder.sequence_loss(qg.model, tokens, mask,
                                     overrides=[(control_position, vec)])
        return loss, sum(mask)

    checkpoint_fn = None
    if ckpt_dir is not None:
        def checkpoint_fn(step: int, opt: ad.Adam) -> None:
            save_qg(ckpt_dir, qg, opt, step, cfg)

    return run_training(params, len(encoded), loss_fn, cfg, adam=adam,
                        start_step=start_step, loss_csv=loss_csv,
                        checkpoint_fn=checkpoint_fn,
                        checkpoint_every=checkpoint_every)


# ---------------------------------------------------------------------------
# decoding


def apply_repetition_penalty(logits: np.ndarray, context: Sequence[int],
                             theta: float) -> np.ndarray:
    """CTRL rule over every context token, prompt included: positive logits
    are divided by theta, negative ones multiplied."""
    if theta == 1.0:
        return logits
    out = logits.copy()
    idx = np.unique(np.asarray(context, dtype=np.int64))
    vals = out[idx]
    out[idx] = np.where(vals > 0, vals / theta, vals * theta)
    return out


def nucleus_sample(probs: np.ndarray, top_p: float, rng: np.random.Generator) -> int:
    """Sample from the smallest probability-sorted prefix with mass >= top_p."""
    order = np.argsort(probs)[::-1]
    sorted_p = probs[order]
    # tolerance keeps exact-boundary masses (e.g. 0.6 + 0.3 vs 0.9) stable
    # against float rounding in the cumsum
    cut = int(np.searchsorted(np.cumsum(sorted_p), top_p - 1e-12)) + 1
    cut = min(cut, len(probs))
    keep = sorted_p[:cut]
    keep = keep / keep.sum()
    return int(order[int(rng.choice(cut, p=keep))])


def _gen_prompt(qg: QG, state: StudentHistory, max_new: int) -> tuple[list[int], int]:
    from .corpus import encode_student_state
    budget = qg.context_limit - max_new - 2
    if budget < 0:
        raise QGenError(f"max_new_tokens {max_new} leaves no room for the prompt")
    state_tokens = truncate_context(encode_student_state(qg.vocab, state), budget) \
        if budget > 0 else []
    control_position = len(state_tokens)
    return state_tokens + [PAD, GEN], control_position


def generate(qg: QG, state: StudentHistory, d_target: float,
             params: SamplingParams | None = None, sample_index: int = 0) -> Question:
    """One sampled question for (state, d_target); raises GenerationError if
    the model stops without emitting any word token."""
    params = params or SamplingParams()
    with ad.no_grad():
        vec = qg.control.vector(d_target)  # validates the range
    rng = np.random.default_rng([params.seed, sample_index])
    prompt, control_position = _gen_prompt(qg, state, params.max_new_tokens)
    overrides = [(control_position, vec)]
    tokens = list(prompt)
    generated: list[int] = []
    for _ in range(params.max_new_tokens):
        with ad.no_grad():
            logits = decoder.forward(qg.model, tokens, overrides).data[-1]
        logits = apply_repetition_penalty(logits, tokens, params.repetition_penalty)
        if params.temperature != 1.0:
            logits = logits / params.temperature
        z = logits - logits.max()
        e = np.exp(z)
        nxt = nucleus_sample(e / e.sum(), params.top_p, rng)
        if nxt == A_TOK:
            break
        generated.append(nxt)
        tokens.append(nxt)
    words = [qg.vocab.surface(t) for t in generated if qg.vocab.is_word(t)]
    if not words:
        raise GenerationError(
            f"no word tokens in {len(generated)} sampled tokens at d={d_target}")
    return Question(tuple(words))


@dataclass
class GenBatch:
    questions: list[Question]
    failures: int
    seconds: float


def generate_batch(qg: QG, state: StudentHistory, d_target: float, n: int,
                   params: SamplingParams | None = None,
                   skip_failures: bool = False) -> GenBatch:
    """n independently seeded samples; sample i of n reproduces
    generate(..., sample_index=i) exactly."""
    if n < 1:
        raise QGenError("n must be >= 1")
    params = params or SamplingParams()
    questions: list[Question] = []
    failures = 0
    t0 = time.perf_counter()
    for i in range(n):
        try:
            questions.append(generate(qg, state, d_target, params, sample_index=i))
        except GenerationError:
            if not skip_failures:
                raise
            failures += 1
    return GenBatch(questions, failures, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# checkpoints


def save_qg(ckpt_dir: str | Path, qg: QG, adam: ad.Adam | None = None,
            step: int = 0, train_cfg: TrainConfig | None = None) -> None:
    tensors = {name: p.data for name, p in qg.model.named_parameters()}
    tensors["control.w"] = qg.control.w.data
    tensors["control.b"] = qg.control.b.data
    if adam is not None:
        named = qg.model.named_parameters() + (
            [("control.w", qg.control.w), ("control.b", qg.control.b)]
            if qg.control.affine else [("control.w", qg.control.w)])
        for (name, _), m, v in zip(named, adam.m, adam.v):
            tensors["opt.m." + name] = m
            tensors["opt.v." + name] = v
    fields = {
        "config": asdict(qg.model.config),
        "seed": qg.model.config.seed,
        "kind": "qg",
        "vocab": qg.vocab.to_json(),
        "affine": qg.control.affine,
        "context_limit": qg.context_limit,
        "step": step,
        "adam": None if adam is None else {"lr": adam.lr, "step_count": adam.step_count},
        "train_config": None if train_cfg is None else asdict(train_cfg),
    }
    decoder.write_tensors(ckpt_dir, tensors, fields)


def load_qg(ckpt_dir: str | Path) -> QG:
    tensors, manifest = decoder.read_tensors(ckpt_dir)
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
    model = decoder.Model(config, params)
    control = ControlProjection(config.d_model, seed=config.seed,
                                affine=manifest.get("affine", True))
    for key, tgt in (("control.w", control.w), ("control.b", control.b)):
        if key not in tensors:
            raise decoder.CheckpointError(f"checkpoint missing tensor '{key}'")
        tgt.data = tensors[key]
    vocab = Vocab.from_json(manifest["vocab"])
    return QG(model, vocab, control,
              manifest.get("context_limit") or config.max_seq)


def load_qg_training(ckpt_dir: str | Path) -> tuple[QG, ad.Adam, int, TrainConfig]:
    tensors, manifest = decoder.read_tensors(ckpt_dir)
    qg = load_qg(ckpt_dir)
    if manifest.get("adam") is None:
        raise decoder.CheckpointError("checkpoint has no optimizer state to resume")
    adam = ad.Adam(qg.parameters(), lr=manifest["adam"]["lr"])
    adam.step_count = manifest["adam"]["step_count"]
    names = [name for name, _ in qg.model.named_parameters()]
    names.append("control.w")
    if qg.control.affine:
        names.append("control.b")
    try:
        adam.m = [tensors["opt.m." + n].copy() for n in names]
        adam.v = [tensors["opt.v." + n].copy() for n in names]
    except KeyError as e:
        raise decoder.CheckpointError(f"checkpoint missing optimizer tensor {e}")
    if manifest.get("train_config") is None:
        raise decoder.CheckpointError("checkpoint has no training config to resume")
    return qg, adam, manifest["step"], TrainConfig(**manifest["train_config"])
