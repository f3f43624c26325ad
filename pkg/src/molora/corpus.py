"""Seeded synthetic question-answering corpora over two disjoint text domains.

Each domain is a template grammar: fixed question strings whose answers are
patterns filled from per-scene attribute assignments. A scene id deterministically
selects one value per attribute, so every answer is a learnable function of
(scene, question); a couple of templates per domain have scene-independent
answers, learnable from the question text alone. The two standard domains use
disjoint scene-id ranges and near-disjoint answer vocabularies, which is what
makes second-domain fine-tuning a genuine forgetting stressor.

Tokenization is word-level whitespace over a vocabulary shared by both domains,
with reserved pad / stop / unknown / separator ids in the first four slots.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .autodiff import rng_stream

PAD_ID, STOP_ID, UNK_ID, SEP_ID = 0, 1, 2, 3
RESERVED = ("<pad>", "<stop>", "<unk>", "<sep>")


class VocabOverflowError(ValueError):
    """More distinct words than the configured vocabulary capacity."""


class CorpusError(ValueError):
    """Corpus generation request cannot be satisfied."""


@dataclass(frozen=True)
class Template:
    question: str
    answer: str  # may contain {attribute} slots


@dataclass(frozen=True)
class SyntheticDomain:
    name: str
    attributes: dict[str, tuple[str, ...]]
    templates: tuple[Template, ...]
    scenes: int
    scene_offset: int = 0

    def scene_values(self, scene: int, seed: int) -> dict[str, str]:
        """Deterministic attribute assignment for one local scene index."""
        if not 0 <= scene < self.scenes:
            raise CorpusError(f"scene {scene} outside [0, {self.scenes}) for domain {self.name}")
        rng = rng_stream(seed, f"{self.name}/scene/{scene}")
        return {
            attr: values[int(rng.integers(len(values)))]
            for attr, values in sorted(self.attributes.items())
        }

    def answer_words(self) -> set[str]:
        """Every word that can appear in an answer of this domain."""
        words: set[str] = set()
        for t in self.templates:
            fixed = t.answer
            for attr, values in self.attributes.items():
                slot = "{" + attr + "}"
                if slot in fixed:
                    words.update(values)
                    fixed = fixed.replace(slot, " ")
            words.update(fixed.split())
        return words

    def all_words(self) -> set[str]:
        words = set(self.answer_words())
        for t in self.templates:
            words.update(t.question.split())
        return words


@dataclass(frozen=True)
class Sample:
    domain: str
    scene_id: int  # global id (domain offset applied)
    question: str
    answer: str
    split: str


@dataclass(frozen=True)
class Corpus:
    domain: str
    train: tuple[Sample, ...]
    val: tuple[Sample, ...]


class Vocab:
    """Word-level vocabulary; reserved control tokens occupy ids 0..3."""

    def __init__(self, words: list[str]):
        self.words = list(RESERVED) + list(words)
        if len(set(self.words)) != len(self.words):
            raise ValueError("vocabulary contains duplicate words")
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    @classmethod
    def build(cls, domains, capacity: int) -> "Vocab":
        """Union vocabulary over every word the domains can emit."""
        words = sorted(set().union(*(d.all_words() for d in domains)))
        if len(words) + len(RESERVED) > capacity:
            raise VocabOverflowError(
                f"{len(words) + len(RESERVED)} words exceed the configured vocab size {capacity}"
            )
        return cls(words)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(w, UNK_ID) for w in text.split()]

    def decode(self, ids) -> str:
        """Drop reserved ids and ids beyond the word list (a model vocabulary
        may be padded wider than the actual lexicon)."""
        return " ".join(self.words[i] for i in ids if len(RESERVED) <= i < len(self.words))


def gen_corpus(domain: SyntheticDomain, n_train: int, n_val: int, seed: int) -> Corpus:
    """Sample (scene, question) instances without replacement and split them.

    Train and validation are disjoint at the (scene, question) level by
    construction; regeneration with the same seed is identical.
    """
    if n_train < 1 or n_val < 1:
        raise CorpusError(f"need n_train >= 1 and n_val >= 1, got {n_train}, {n_val}")
    pool = [(s, t) for s in range(domain.scenes) for t in range(len(domain.templates))]
    if n_train + n_val > len(pool):
        raise CorpusError(
            f"domain {domain.name} offers {len(pool)} distinct (scene, question) pairs, "
            f"fewer than the requested {n_train + n_val}"
        )
    order = rng_stream(seed, f"{domain.name}/split").permutation(len(pool))

    def make(idx: int, split: str) -> Sample:
        scene, t = pool[idx]
        template = domain.templates[t]
        values = domain.scene_values(scene, seed)
        return Sample(
            domain=domain.name,
            scene_id=domain.scene_offset + scene,
            question=template.question,
            answer=template.answer.format(**values),
            split=split,
        )

    train = tuple(make(int(i), "train") for i in order[:n_train])
    val = tuple(make(int(i), "val") for i in order[n_train:n_train + n_val])
    return Corpus(domain=domain.name, train=train, val=val)


def answer_vocab_overlap(a: Corpus, b: Corpus) -> float:
    """Shared fraction of the union answer vocabulary of two generated corpora."""
    wa = {w for s in a.train + a.val for w in s.answer.split()}
    wb = {w for s in b.train + b.val for w in s.answer.split()}
    return len(wa & wb) / len(wa | wb)


# Both domains build their answers from one shared structural lexicon (the,
# is, today, holds, ...) while slot values and question words stay
# domain-specific. Stage-1 training therefore teaches the output machinery for
# every structural token either domain will ever need, the way a pretrained
# language model already knows the scaffolding words of a new domain; what
# transfer can destroy, and adapters are meant to preserve, is the mapping,
# not the lexicon. Measured answer-vocabulary overlap stays well under the
# 30% limit because the slot values dominate both vocabularies.

WORKSHOP = SyntheticDomain(
    name="workshop",
    attributes={
        "tool": ("clamp", "chisel", "mallet", "rasp", "gouge", "spokeshave"),
        "wood": ("oak", "pine", "birch", "walnut", "maple", "elm"),
        "finish": ("oiled", "waxed", "lacquered", "stained"),
        "count": ("two", "three", "four", "five", "six", "seven"),
        "station": ("bench", "lathe", "vise", "rack"),
    },
    templates=(
        Template("which tool is in use right now", "the {tool} is busy today"),
        Template("name the tool lying nearest", "a {tool} stands ready"),
        Template("what wood is being shaped today", "the piece is {wood}"),
        Template("identify the timber species", "{wood} is the timber"),
        Template("what finish covers the surface", "the surface is {finish}"),
        Template("how many parts are laid out", "it counts {count} parts"),
        Template("where is the workpiece mounted", "the {station} holds the work"),
        Template("state the mounting point", "work sits near the {station}"),
        Template("what kind of room is shown", "this place is a busy workshop"),
        Template("is any machine running", "yes one machine is busy"),
    ),
    scenes=128,
    scene_offset=0,
)

ORCHARD = SyntheticDomain(
    name="orchard",
    attributes={
        "fruit": ("apples", "pears", "plums", "quinces", "figs", "apricots"),
        "row": ("north", "south", "east", "west"),
        "crates": ("ten", "twenty", "thirty", "forty", "fifty", "sixty"),
        "weather": ("sunny", "cloudy", "misty", "breezy"),
        "task": ("pruning", "picking", "grafting", "watering"),
    },
    templates=(
        Template("which fruit hangs in this row", "the {fruit} are ready today"),
        Template("name the crop being gathered", "this place holds {fruit}"),
        Template("which row are we walking", "it is the {row} side"),
        Template("state the row direction", "the {row} side is open"),
        Template("how many crates are filled", "it counts {crates} today"),
        Template("describe the weather overhead", "today is {weather}"),
        Template("what task occupies the crew", "the work is {task}"),
        Template("name the current orchard job", "{task} is the work today"),
        Template("what kind of place is shown", "this place is open today"),
        Template("does the harvest look good", "yes it is near full"),
    ),
    scenes=128,
    scene_offset=128,
)

STANDARD_DOMAINS = (WORKSHOP, ORCHARD)
ANSWER_OVERLAP_LIMIT = 0.30


def standard_corpora(n_train: int, n_val: int, seed: int, vocab_capacity: int,
                     domains: tuple[SyntheticDomain, SyntheticDomain] = STANDARD_DOMAINS,
                     ) -> tuple[Corpus, Corpus, Vocab]:
    """Generate both standard corpora plus their union vocabulary.

    Enforces the answer-vocabulary separation the forgetting protocol relies
    on: the two domains may share less than 30% of their combined answer words.
    """
    a = gen_corpus(domains[0], n_train, n_val, seed)
    b = gen_corpus(domains[1], n_train, n_val, seed)
    overlap = answer_vocab_overlap(a, b)
    if overlap >= ANSWER_OVERLAP_LIMIT:
        raise CorpusError(
            f"domains share {overlap:.1%} of their answer vocabulary "
            f"(limit {ANSWER_OVERLAP_LIMIT:.0%})"
        )
    vocab = Vocab.build(domains, vocab_capacity)
    return a, b, vocab


def total_scenes(domains=STANDARD_DOMAINS) -> int:
    return max(d.scene_offset + d.scenes for d in domains)


# ---- JSONL interchange -----------------------------------------------------------


def write_jsonl(samples, path) -> None:
    """One JSON object per line: {domain, scene_id, question, answer, split}."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps({
                "domain": s.domain,
                "scene_id": s.scene_id,
                "question": s.question,
                "answer": s.answer,
                "split": s.split,
            }, sort_keys=True) + "\n")


def read_jsonl(path) -> list[Sample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rec = json.loads(line)
                out.append(Sample(
                    domain=rec["domain"], scene_id=int(rec["scene_id"]),
                    question=rec["question"], answer=rec["answer"], split=rec["split"],
                ))
    return out
