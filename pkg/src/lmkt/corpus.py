"""Vocabulary, token encodings, dataset files, and the SLAM ingestion adapter.

Sequence layout: a question is ``<Q> w1 ... wn <A>``, a student state is the
concatenation of question encodings each followed by ``<Y>`` or ``<N>``, and
a generation example is ``state, control slot, <G>, question`` with the loss
mask opened only after ``<G>``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

PAD, Q_TOK, A_TOK, YES, NO, GEN = range(6)
SPECIAL_SURFACES = ("<PAD>", "<Q>", "<A>", "<Y>", "<N>", "<G>")
N_SPECIALS = 6


class CorpusError(ValueError):
    pass


class OOVError(CorpusError):
    pass


class RegistryCapacityError(CorpusError):
    pass


class SlamParseError(CorpusError):
    pass


@dataclass(frozen=True)
class Question:
    words: tuple[str, ...]

    def __post_init__(self):
        if not self.words:
            raise CorpusError("a question needs at least one word")
        bad = [w for w in self.words if w in SPECIAL_SURFACES]
        if bad:
            raise CorpusError(f"question words collide with special tokens: {bad}")

    @classmethod
    def from_text(cls, text: str) -> "Question":
        return cls(tuple(text.split()))

    @property
    def text(self) -> str:
        return " ".join(self.words)


@dataclass(frozen=True)
class Interaction:
    question: Question
    correct: bool


@dataclass(frozen=True)
class StudentHistory:
    student_id: str
    interactions: tuple[Interaction, ...]


class Vocab:
    """Word-level vocabulary; ids 0..5 are reserved for the special tokens."""

    def __init__(self, words: Sequence[str]):
        self.words = list(words)
        bad = [w for w in self.words if w in SPECIAL_SURFACES]
        if bad:
            raise CorpusError(f"words collide with special token surfaces: {bad}")
        if len(set(self.words)) != len(self.words):
            raise CorpusError("duplicate words in vocabulary")
        self.id_of = {w: N_SPECIALS + i for i, w in enumerate(self.words)}

    @property
    def size(self) -> int:
        return N_SPECIALS + len(self.words)

    def id(self, word: str) -> int:
        try:
            return self.id_of[word]
        except KeyError:
            raise OOVError(f"word not in vocabulary: {word!r}") from None

    def surface(self, token_id: int) -> str:
        if 0 <= token_id < N_SPECIALS:
            return SPECIAL_SURFACES[token_id]
        if token_id < self.size:
            return self.words[token_id - N_SPECIALS]
        raise CorpusError(f"token id {token_id} outside vocabulary of size {self.size}")

    def is_word(self, token_id: int) -> bool:
        return N_SPECIALS <= token_id < self.size

    def to_json(self) -> dict:
        return {"words": self.words}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocab":
        return cls(obj["words"])


def build_vocab(questions: Iterable[Question]) -> Vocab:
    """Deterministic vocabulary: words sorted lexicographically, ids from 6 up."""
    seen: set[str] = set()
    for q in questions:
        seen.update(q.words)
    if not seen:
        raise CorpusError("build_vocab needs at least one question")
    return Vocab(sorted(seen))


def encode_question(vocab: Vocab, q: Question) -> list[int]:
    return [Q_TOK] + [vocab.id(w) for w in q.words] + [A_TOK]


def decode_question(vocab: Vocab, tokens: Sequence[int]) -> Question:
    """Inverse of encode_question; special tokens are structural and dropped."""
    words = [vocab.surface(t) for t in tokens if vocab.is_word(t)]
    if not words:
        raise CorpusError("token sequence contains no word tokens")
    return Question(tuple(words))


def answer_token(correct: bool) -> int:
    return YES if correct else NO


def encode_student_state(vocab: Vocab, history: StudentHistory) -> list[int]:
    out: list[int] = []
    for it in history.interactions:
        out.extend(encode_question(vocab, it.question))
        out.append(answer_token(it.correct))
    return out


def encode_kt_example(vocab: Vocab, history: StudentHistory) -> tuple[list[int], list[bool]]:
    """Full-history tokens plus an all-true transition mask (plain LM objective)."""
    if not history.interactions:
        raise CorpusError("encode_kt_example needs at least one interaction")
    tokens = encode_student_state(vocab, history)
    return tokens, [True] * (len(tokens) - 1)


@dataclass(frozen=True)
class QGEncoding:
    tokens: list[int]
    control_position: int
    t_g: int
    loss_mask: list[bool]


def encode_qg_example(vocab: Vocab, state: StudentHistory, question: Question) -> QGEncoding:
    """state ++ [control slot] ++ [<G>] ++ question, loss open only after <G>.

    The control slot holds <PAD>; its embedding is overridden by the
    difficulty control vector at forward time. loss_mask[t] covers the
    transition predicting tokens[t+1], so exactly the question tokens
    (including its <Q>/<A> frame) are scored.
    """
    state_tokens = encode_student_state(vocab, state)
    control_position = len(state_tokens)
    t_g = control_position + 1
    tokens = state_tokens + [PAD, GEN] + encode_question(vocab, question)
    loss_mask = [t >= t_g for t in range(len(tokens) - 1)]
    return QGEncoding(tokens, control_position, t_g, loss_mask)


def truncate_context(tokens: Sequence[int], limit: int) -> list[int]:
    """Keep the trailing ``limit`` tokens, then snap forward to a <Q> boundary.

    A cut mid-question would leave a fragment with no meaning in a closed
    grammar, so after the positional cut everything before the first <Q> in
    the suffix is dropped as well.
    """
    if limit < 1:
        raise CorpusError("truncate_context limit must be >= 1")
    toks = list(tokens)
    if len(toks) <= limit:
        return toks
    suffix = toks[len(toks) - limit:]
    for i, t in enumerate(suffix):
        if t == Q_TOK:
            return suffix[i:]
    return []


# ---------------------------------------------------------------------------
# question-as-ID encoding (the DKT-style baseline)


class QuestionIdRegistry:
    """Maps distinct question texts to single token ids; id 6 is <UNK-Q>."""

    UNK = N_SPECIALS  # one reserved slot for questions never seen in training

    def __init__(self, capacity: int = 4096):
        self.capacity = capacity
        self.ids: dict[str, int] = {}

    def register(self, q: Question) -> int:
        tid = self.ids.get(q.text)
        if tid is not None:
            return tid
        if len(self.ids) >= self.capacity:
            raise RegistryCapacityError(
                f"question-id registry is full (capacity {self.capacity})")
        tid = N_SPECIALS + 1 + len(self.ids)
        self.ids[q.text] = tid
        return tid

    def lookup(self, q: Question) -> int:
        return self.ids.get(q.text, self.UNK)

    @property
    def vocab_size(self) -> int:
        return N_SPECIALS + 1 + len(self.ids)

    def to_json(self) -> dict:
        # insertion order encodes the id assignment
        return {"capacity": self.capacity, "questions": list(self.ids)}

    @classmethod
    def from_json(cls, obj: dict) -> "QuestionIdRegistry":
        reg = cls(obj["capacity"])
        for text in obj["questions"]:
            reg.register(Question.from_text(text))
        return reg


def encode_id_state(registry: QuestionIdRegistry, history: StudentHistory,
                    register: bool = False) -> list[int]:
    out: list[int] = []
    for it in history.interactions:
        qid = registry.register(it.question) if register else registry.lookup(it.question)
        out.extend((qid, answer_token(it.correct)))
    return out


# ---------------------------------------------------------------------------
# dataset files (JSONL, one student per line)


def history_to_record(h: StudentHistory) -> dict:
    return {
        "student_id": h.student_id,
        "interactions": [
            {"question": it.question.text, "correct": it.correct}
            for it in h.interactions
        ],
    }


def history_from_record(obj: dict) -> StudentHistory:
    return StudentHistory(
        student_id=obj["student_id"],
        interactions=tuple(
            Interaction(Question.from_text(r["question"]), bool(r["correct"]))
            for r in obj["interactions"]
        ),
    )


def write_histories(path: str | Path, histories: Iterable[StudentHistory]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for h in histories:
            fh.write(json.dumps(history_to_record(h), sort_keys=True) + "\n")


def read_histories(path: str | Path) -> list[StudentHistory]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(history_from_record(json.loads(line)))
    return out


def write_oracle_sidecar(path: str | Path, traces: Iterable[tuple[str, Sequence[float]]]) -> None:
    """One line per student: the simulator's true correctness probability per step."""
    with open(path, "w", encoding="utf-8") as fh:
        for student_id, probs in traces:
            rec = {"student_id": student_id, "p": [float(p) for p in probs]}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_oracle_sidecar(path: str | Path) -> dict[str, list[float]]:
    out: dict[str, list[float]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rec = json.loads(line)
                out[rec["student_id"]] = [float(p) for p in rec["p"]]
    return out


# ---------------------------------------------------------------------------
# Duolingo SLAM shared-task ingestion


_SUPPORTED_SLAM_VERSIONS = {"1"}


def ingest_slam(path: str | Path, languages: str | None = None) -> list[StudentHistory]:
    """Parse a SLAM shared-task text file into per-user histories.

    Exercises are blocks of per-token lines (last column: 0 = correct token,
    1 = mistake) preceded by '#' metadata lines and separated by blank lines.
    A question is marked incorrect as soon as any of its tokens is. Only
    reverse_translate exercises are kept; ``languages`` (e.g. "en_es")
    filters on the metadata key of the same name when given.
    """
    users: dict[str, list[Interaction]] = {}
    order: list[str] = []
    meta: dict[str, str] = {}
    words: list[str] = []
    labels: list[int] = []
    meta_line_no = 0

    def flush(line_no: int) -> None:
        nonlocal meta, words, labels
        if not words:
            meta, words, labels = {}, [], []
            return
        if "user" not in meta:
            raise SlamParseError(
                f"line {line_no}: exercise block without a user in its metadata")
        keep = meta.get("format", "reverse_translate") == "reverse_translate"
        if languages is not None and meta.get("languages") != languages:
            keep = False
        if keep:
            user = meta["user"]
            if user not in users:
                users[user] = []
                order.append(user)
            users[user].append(
                Interaction(Question(tuple(words)), correct=all(l == 0 for l in labels)))
        meta, words, labels = {}, [], []

    with open(path, encoding="utf-8") as fh:
        line_no = 0
        for raw in fh:
            line_no += 1
            line = raw.rstrip("\n")
            if not line.strip():
                flush(line_no)
                continue
            if line.startswith("#"):
                if words:
                    flush(line_no)
                meta_line_no = line_no
                for part in line[1:].split():
                    if ":" in part:
                        key, _, value = part.partition(":")
                        meta[key] = value
                version = meta.get("version") or meta.get("slam_version")
                if version is not None and version not in _SUPPORTED_SLAM_VERSIONS:
                    raise SlamParseError(
                        f"line {meta_line_no}: unknown SLAM format version {version!r}")
                continue
            fields = line.split()
            if len(fields) < 2:
                raise SlamParseError(f"line {line_no}: malformed token line {line!r}")
            if fields[-1] not in ("0", "1"):
                raise SlamParseError(
                    f"line {line_no}: token label must be 0 or 1, got {fields[-1]!r}")
            words.append(fields[1].lower())
            labels.append(int(fields[-1]))
        flush(line_no + 1)

    return [StudentHistory(u, tuple(users[u])) for u in order]
