"""Synthetic byte-level corpora: templated prose and instruction pairs."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

TOPICS = {
    "weather": (["rain", "snow", "wind", "storm", "sunshine", "fog"],
                ["fell over the hills", "came in the night", "stayed for days", "cleared by noon"]),
    "food": (["bread", "soup", "cheese", "apples", "rice", "honey"],
             ["was served warm", "tasted sweet", "sold out early", "filled the kitchen"]),
    "animals": (["the cat", "a dog", "the horse", "an owl", "the fox", "a rabbit"],
                ["ran across the field", "slept by the door", "watched the road", "hid in the barn"]),
    "numbers": (["seven", "twelve", "forty", "three hundred", "ninety", "eleven"],
                ["people arrived", "boxes were counted", "ships left port", "coins were found"]),
    "music": (["the violin", "a drum", "the piano", "an old song", "the choir", "a flute"],
              ["played all evening", "filled the hall", "was out of tune", "echoed in the street"]),
}
OPENERS = ["Findings show that", "I once heard that", "People often say that", "Back in the day,",
           "It all started when", "In my experience,", "Once upon a time,", "I remember when",
           "The news mentioned that", "Someone told me that"]
CLOSERS = ["", " It was a quiet day.", " Nobody said a word.", " Then everyone went home.",
           " That is how it went."]
NAMES = ["Anna", "Ben", "Clara", "David", "Emma", "Felix", "Grace", "Hugo"]


def toy_sentence(rng: np.random.Generator) -> str:
    topic = list(TOPICS)[rng.integers(len(TOPICS))]
    subjects, predicates = TOPICS[topic]
    opener = OPENERS[rng.integers(len(OPENERS))]
    s = f"{opener} {subjects[rng.integers(len(subjects))]} {predicates[rng.integers(len(predicates))]}."
    if rng.random() < 0.3:
        s += f" {NAMES[rng.integers(len(NAMES))]} said so."
    return s + CLOSERS[rng.integers(len(CLOSERS))]


def toy_corpus(n_chars: int, rng: np.random.Generator) -> str:
    parts: list[str] = []
    total = 0
    while total < n_chars:
        s = toy_sentence(rng)
        parts.append(s)
        total += len(s) + 1
    return "\n".join(parts)[:n_chars]


QUESTIONS = [
    ("What fell over the hills?", "The {w} fell over the hills."),
    ("Tell me about {n}.", "{n} said the {w} came in the night."),
    ("What was served warm?", "The {f} was served warm."),
    ("Where did the animal sleep?", "It slept by the door."),
    ("How many people arrived?", "{c} people arrived."),
    ("Who played all evening?", "{n} played the piano all evening."),
]


def toy_instructions(n: int, rng: np.random.Generator) -> list[dict]:
    out = []
    for _ in range(n):
        q, a = QUESTIONS[rng.integers(len(QUESTIONS))]
        fill = {
            "w": TOPICS["weather"][0][rng.integers(6)],
            "f": TOPICS["food"][0][rng.integers(6)],
            "c": TOPICS["numbers"][0][rng.integers(6)].capitalize(),
            "n": NAMES[rng.integers(len(NAMES))],
        }
        out.append({"prompt": q.format(**fill), "response": a.format(**fill)})
    return out


def write_corpus(path: str | Path, n_chars: int, seed: int) -> Path:
    p = Path(path)
    p.write_text(toy_corpus(n_chars, np.random.default_rng(seed)), encoding="utf-8")
    return p


def write_instructions(path: str | Path, n: int, seed: int) -> Path:
    p = Path(path)
    rows = toy_instructions(n, np.random.default_rng(seed))
    p.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return p
