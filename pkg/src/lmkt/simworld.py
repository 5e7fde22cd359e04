"""Synthetic reverse-translation world with an IRT-style ground-truth oracle.

A closed template grammar (single word / S V / S V O / M S V O) over
deterministic pronounceable words generates the question space. A seeded
subsample of that space, biased toward short and common-word questions,
forms the question bank, so grammatical questions outside the bank exist by
construction. Students carry a latent ability that grows with practice plus
a word-exposure bonus; correctness is Bernoulli(sigmoid(ability_eff - b)),
which supplies the true probabilities no real dataset has.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import Interaction, Question, StudentHistory

_TAG_RARITY = 101
_TAG_BANK = 102
_TAG_SPLIT = 103
_TAG_STUDENT = 104

_CONSONANTS = "bdfgklmnprst"
_VOWELS = "aeiou"
_SYLLABLES = [c + v for c in _CONSONANTS for v in _VOWELS]

TEMPLATES = {
    "W": ("O",),
    "SV": ("S", "V"),
    "SVO": ("S", "V", "O"),
    "MSVO": ("M", "S", "V", "O"),
}


class WorldConfigError(ValueError):
    pass


def stream(*keys: int) -> np.random.Generator:
    """Named RNG sub-stream; every sampling decision hangs off one of these."""
    return np.random.default_rng(list(keys))


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@dataclass(frozen=True)
class WorldConfig:
    n_subjects: int = 6
    n_verbs: int = 7
    n_objects: int = 8
    n_modifiers: int = 5
    templates: tuple[str, ...] = ("W", "SV", "SVO", "MSVO")
    bank_size: int | None = 1000
    template_mix: dict = field(default_factory=lambda: {
        "W": 0.04, "SV": 0.10, "SVO": 0.46, "MSVO": 0.40})
    bank_commonness_power: float = 2.0
    rarity_alpha: float = 1.3
    rarity_beta: float = 2.5
    beta0: float = -0.9
    beta_len: float = 0.45
    beta_rarity: float = 1.6
    ability_mean: float = 0.8
    ability_sd: float = 0.9
    learn_rate: float = 0.06
    exposure_bonus: float = 0.5
    exposure_threshold: int = 2
    unseen_frac: float = 0.1
    unseen_boost: float = 3.0
    n_train_students: int = 500
    n_dev_students: int = 150
    n_test_students: int = 120
    steps_per_student: int = 40
    seed: int = 0

    def __post_init__(self):
        for name in ("n_subjects", "n_verbs", "n_objects", "n_modifiers"):
            if getattr(self, name) < 1:
                raise WorldConfigError(f"{name} must be >= 1")
        if self.learn_rate < 0:
            raise WorldConfigError("learn_rate must be >= 0")
        unknown = [t for t in self.templates if t not in TEMPLATES]
        if unknown:
            raise WorldConfigError(f"unknown templates: {unknown}")


@dataclass(frozen=True)
class SimQuestion:
    question: Question
    b: float


@dataclass
class SimStudent:
    ability: float
    exposure: dict[str, int]
    rng: np.random.Generator


def _make_words(n: int, offset: int) -> list[str]:
    # first syllable is unique per index, so words never collide
    return [_SYLLABLES[(offset + i) % len(_SYLLABLES)]
            + _SYLLABLES[((offset + i) * 17 + 29) % len(_SYLLABLES)]
            for i in range(n)]


class SimWorld:
    """Lexicon, per-word rarities, the closed grammar, and the question bank."""

    def __init__(self, cfg: WorldConfig):
        total = cfg.n_subjects + cfg.n_verbs + cfg.n_objects + cfg.n_modifiers
        if total > len(_SYLLABLES):
            raise WorldConfigError(
                f"word classes need {total} words, scheme supports {len(_SYLLABLES)}")
        self.cfg = cfg
        off = 0
        self.lexicon: dict[str, list[str]] = {}
        for cls, n in (("S", cfg.n_subjects), ("V", cfg.n_verbs),
                       ("O", cfg.n_objects), ("M", cfg.n_modifiers)):
            self.lexicon[cls] = _make_words(n, off)
            off += n
        self.class_of: dict[str, str] = {}
        for cls, words in self.lexicon.items():
            for w in words:
                self.class_of[w] = cls
        rar_rng = stream(cfg.seed, _TAG_RARITY)
        all_words = [w for cls in ("S", "V", "O", "M") for w in self.lexicon[cls]]
        rarities = rar_rng.beta(cfg.rarity_alpha, cfg.rarity_beta, size=len(all_words))
        self.rarity = {w: float(r) for w, r in zip(all_words, rarities)}
        self.bank = self._build_bank()
        self._bank_texts = {sq.question.text for sq in self.bank}

    def words(self) -> list[str]:
        return sorted(self.rarity)

    def question_b(self, q: Question) -> float:
        """Latent difficulty of any lexicon question, bank member or not."""
        cfg = self.cfg
        mean_rarity = sum(self.rarity[w] for w in q.words) / len(q.words)
        return cfg.beta0 + cfg.beta_len * len(q.words) + cfg.beta_rarity * mean_rarity

    def is_grammatical(self, q: Question) -> bool:
        """Template-grammar membership: the fluency stand-in."""
        for tmpl in self.cfg.templates:
            classes = TEMPLATES[tmpl]
            if len(classes) == len(q.words) and all(
                    self.class_of.get(w) == c for w, c in zip(q.words, classes)):
                return True
        return False

    def in_bank(self, q: Question) -> bool:
        return q.text in self._bank_texts

    def _enumerate(self) -> list[tuple[str, Question]]:
        out: list[tuple[str, Question]] = []
        for tmpl in self.cfg.templates:
            combos: list[tuple[str, ...]] = [()]
            for cls in TEMPLATES[tmpl]:
                combos = [c + (w,) for c in combos for w in self.lexicon[cls]]
            out.extend((tmpl, Question(c)) for c in combos)
        return out

    def _build_bank(self) -> list[SimQuestion]:
        cfg = self.cfg
        enumerated = self._enumerate()
        if cfg.bank_size is None or cfg.bank_size >= len(enumerated):
            if cfg.bank_size is not None and cfg.bank_size > len(enumerated):
                raise WorldConfigError(
                    f"bank_size {cfg.bank_size} exceeds the {len(enumerated)} "
                    "questions the grammar can produce")
            chosen = range(len(enumerated))
        else:
            weights = np.empty(len(enumerated))
            counts = {t: sum(1 for tt, _ in enumerated if tt == t) for t in cfg.templates}
            for i, (tmpl, q) in enumerate(enumerated):
                commonness = 1.0 - sum(self.rarity[w] for w in q.words) / len(q.words)
                weights[i] = (cfg.template_mix.get(tmpl, 0.0) / counts[tmpl]
                              * commonness ** cfg.bank_commonness_power)
            if weights.sum() <= 0:
                raise WorldConfigError("template_mix gives zero weight to every question")
            p = weights / weights.sum()
            rng = stream(cfg.seed, _TAG_BANK)
            idx = rng.choice(len(enumerated), size=cfg.bank_size, replace=False, p=p)
            chosen = sorted(int(i) for i in idx)
        return [SimQuestion(enumerated[i][1], self.question_b(enumerated[i][1]))
                for i in chosen]


def gen_question_bank(cfg: WorldConfig) -> list[SimQuestion]:
    return SimWorld(cfg).bank


def new_student(cfg: WorldConfig, student_seed_keys: Sequence[int]) -> SimStudent:
    rng = stream(*student_seed_keys)
    ability = float(rng.normal(cfg.ability_mean, cfg.ability_sd))
    return SimStudent(ability=ability, exposure={}, rng=rng)


def true_correct_prob(cfg: WorldConfig, student: SimStudent, sq: SimQuestion) -> float:
    words = sq.question.words
    practiced = sum(
        1 for w in words if student.exposure.get(w, 0) >= cfg.exposure_threshold)
    a_eff = student.ability + cfg.exposure_bonus * practiced / len(words)
    return sigmoid(a_eff - sq.b)


@dataclass
class SimResult:
    history: StudentHistory
    trace: list[float]          # oracle p at the moment each question was posed
    student: SimStudent         # end-of-history ability and exposure


def simulate_student(cfg: WorldConfig, pool: Sequence[SimQuestion], n_steps: int,
                     student_seed_keys: Sequence[int], student_id: str,
                     pool_weights: np.ndarray | None = None) -> SimResult:
    """Roll one student forward: sample question, answer, learn, repeat."""
    if n_steps < 1:
        raise WorldConfigError("n_steps must be >= 1")
    st = new_student(cfg, student_seed_keys)
    interactions: list[Interaction] = []
    trace: list[float] = []
    for step in range(n_steps):
        if pool_weights is None:
            idx = int(st.rng.integers(len(pool)))
        else:
            idx = int(st.rng.choice(len(pool), p=pool_weights))
        sq = pool[idx]
        p = true_correct_prob(cfg, st, sq)
        correct = bool(st.rng.random() < p)
        interactions.append(Interaction(sq.question, correct))
        trace.append(p)
        for w in sq.question.words:
            st.exposure[w] = st.exposure.get(w, 0) + 1
        gain = 1.0 if correct else 0.2
        st.ability += cfg.learn_rate * gain / math.sqrt(step + 1)
    return SimResult(StudentHistory(student_id, tuple(interactions)), trace, st)


@dataclass
class SplitData:
    histories: list[StudentHistory]
    traces: list[list[float]]
    students: list[SimStudent]


@dataclass
class WorldData:
    world: SimWorld
    seen: list[SimQuestion]
    unseen: list[SimQuestion]
    train: SplitData
    dev: SplitData
    test_seen: SplitData
    test_unseen: SplitData

    @property
    def splits(self) -> dict[str, SplitData]:
        return {"train": self.train, "dev": self.dev,
                "test_seen": self.test_seen, "test_unseen": self.test_unseen}


SPLIT_IDS = {"train": 0, "dev": 1, "test_seen": 2, "test_unseen": 3}


def student_seed_keys(cfg: WorldConfig, split_name: str, index: int) -> tuple[int, ...]:
    """The RNG keys that created a given student; lets callers replay them."""
    return (cfg.seed, _TAG_STUDENT, SPLIT_IDS[split_name], index)


def _simulate_split(cfg: WorldConfig, name: str, n_students: int,
                    pool: list[SimQuestion],
                    pool_weights: np.ndarray | None = None) -> SplitData:
    histories, traces, students = [], [], []
    for i in range(n_students):
        res = simulate_student(
            cfg, pool, cfg.steps_per_student,
            student_seed_keys(cfg, name, i),
            f"{name}_{i:04d}", pool_weights)
        histories.append(res.history)
        traces.append(res.trace)
        students.append(res.student)
    return SplitData(histories, traces, students)


def make_splits(world: SimWorld) -> WorldData:
    """Question holdout plus four independently simulated student groups.

    Training, dev, and test_seen students only ever meet the seen question
    subset; test_unseen students draw from the full bank with held-out
    questions boosted so the unseen-question split has enough instances.
    """
    cfg = world.cfg
    n = len(world.bank)
    n_unseen = int(round(cfg.unseen_frac * n))
    if n_unseen < 1:
        raise WorldConfigError(
            f"bank of {n} questions cannot hold out a {cfg.unseen_frac:.0%} split")
    perm = stream(cfg.seed, _TAG_SPLIT).permutation(n)
    unseen_idx = set(int(i) for i in perm[:n_unseen])
    seen = [world.bank[i] for i in range(n) if i not in unseen_idx]
    unseen = [world.bank[i] for i in range(n) if i in unseen_idx]

    mixed_pool = seen + unseen
    w = np.ones(len(mixed_pool))
    w[len(seen):] = cfg.unseen_boost
    mixed_weights = w / w.sum()

    return WorldData(
        world=world,
        seen=seen,
        unseen=unseen,
        train=_simulate_split(cfg, "train", cfg.n_train_students, seen),
        dev=_simulate_split(cfg, "dev", cfg.n_dev_students, seen),
        test_seen=_simulate_split(cfg, "test_seen", cfg.n_test_students, seen),
        test_unseen=_simulate_split(cfg, "test_unseen", cfg.n_test_students,
                                    mixed_pool, mixed_weights),
    )


def replay_student(cfg: WorldConfig, world: SimWorld,
                   history: StudentHistory, ability0: float) -> SimStudent:
    """Rebuild a student's end state from a known starting ability and history."""
    st = SimStudent(ability=ability0, exposure={}, rng=stream(0))
    for step, it in enumerate(history.interactions):
        for w in it.question.words:
            st.exposure[w] = st.exposure.get(w, 0) + 1
        gain = 1.0 if it.correct else 0.2
        st.ability += cfg.learn_rate * gain / math.sqrt(step + 1)
    return st
