"""Small synthetic corpora for knowledge-injection experiments.

The general corpus follows a fixed grammar in which each animal has a
habitual verb and target, so masked-LM accuracy on it is learnable and
measurable. Fact worlds bind invented subject words to objects through a
relation template; tasks built on top are decidable only from those facts.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .data import KnowledgeTriple, triple_to_cloze

ANIMALS = {
    "cat": ("chases", "mouse"),
    "dog": ("guards", "house"),
    "bird": ("builds", "nest"),
    "fish": ("avoids", "net"),
    "horse": ("pulls", "cart"),
    "cow": ("eats", "grass"),
    "bee": ("visits", "flower"),
    "fox": ("hunts", "rabbit"),
    "owl": ("watches", "field"),
    "frog": ("catches", "fly"),
    "bear": ("finds", "honey"),
    "goat": ("climbs", "hill"),
}
ADJECTIVES = (
    "old", "young", "small", "big", "quick", "slow", "brown", "white", "black",
    "quiet", "loud", "happy", "tired", "clever", "lazy", "calm", "wild",
    "gentle", "fierce", "hungry", "sleepy", "busy", "shy", "brave", "proud",
    "noisy", "grey", "red", "tiny", "huge",
)

SYLLABLES = ("ka", "lo", "mi", "ru", "te", "zo", "pa", "ni", "vu", "se", "do", "fi", "gu", "ha", "jo", "be")


def general_sentences(n: int, seed: int = 0, exclude: set[str] | None = None) -> list[str]:
    """``n`` distinct grammar sentences, e.g. ``the old cat chases the mouse .``"""
    combos = [
        f"the {adj} {animal} {verb} the {target} ."
        for animal, (verb, target) in ANIMALS.items()
        for adj in ADJECTIVES
    ]
    combos = [c for c in combos if not exclude or c not in exclude]
    if n > len(combos):
        raise ValueError(f"only {len(combos)} distinct general sentences available")
    rng = np.random.default_rng(seed)
    return [combos[i] for i in rng.permutation(len(combos))[:n]]


def pseudo_words(n: int, seed: int, syllables: int = 3) -> list[str]:
    rng = np.random.default_rng(seed)
    pool = ["".join(p) for p in itertools.product(SYLLABLES, repeat=syllables)]
    return [pool[i] for i in rng.permutation(len(pool))[:n]]


@dataclass
class FactWorld:
    triples: list[KnowledgeTriple]
    classes: dict[str, int]  # object -> task label

    def cloze_sentences(self, templates=None) -> list[str]:
        return [" ".join(triple_to_cloze(t, templates).tokens) for t in self.triples]

    def statements(self, templates=None) -> list[str]:
        return [" ".join(triple_to_cloze(t, templates).filled()) for t in self.triples]

    def task_examples(self, templates=None) -> list[dict]:
        """Cloze text labelled by the class of the hidden object."""
        return [
            {"text": " ".join(triple_to_cloze(t, templates).tokens), "label": self.classes[t.object]}
            for t in self.triples
        ]


def fact_world(
    n_facts: int,
    relation: str = "/r/LocatedAt",
    objects: dict[str, int] | None = None,
    seed: int = 0,
    subjects: list[str] | None = None,
) -> FactWorld:
    """Bind ``n_facts`` invented subjects to objects, balanced over objects."""
    objects = objects or {"paris": 0, "rome": 0, "tokyo": 1, "lima": 1}
    subjects = subjects or pseudo_words(n_facts, seed)
    names = sorted(objects)
    rng = np.random.default_rng([seed, 7])
    assign = [names[i % len(names)] for i in range(n_facts)]
    assign = [assign[i] for i in rng.permutation(n_facts)]
    triples = [KnowledgeTriple(s, relation, o) for s, o in zip(subjects, assign)]
    return FactWorld(triples, dict(objects))
