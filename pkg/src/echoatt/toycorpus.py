"""Deterministic generator for the bundled toy corpus of short movie reviews.

Reviews keep a consistent sentiment from the first sentence to the rating and
repeat the film title, which gives attention some long-range structure to
learn at character level.  ``python -m echoatt.toycorpus OUT`` regenerates
the shipped file byte for byte.
"""
from __future__ import annotations

import random
import sys
from importlib import resources
from pathlib import Path

BUNDLED_NAME = "toy_reviews.txt"
DEFAULT_DOCS = 3000
DEFAULT_SEED = 1234

_TITLE_ADJ = ["Silent", "Broken", "Golden", "Last", "Hidden", "Crimson", "Frozen", "Distant",
              "Electric", "Quiet", "Burning", "Lonely", "Hollow", "Northern", "Wild", "Paper"]
_TITLE_NOUN = ["Harbor", "Garden", "River", "Mountain", "City", "Letter", "Winter", "Machine",
               "Kingdom", "Road", "Island", "Mirror", "Summer", "Tower", "Promise", "Forest"]
_GENRE = ["drama", "thriller", "comedy", "western", "horror film", "romance", "mystery",
          "war film", "musical", "documentary"]
_PERSON = ["the director", "the lead actor", "the lead actress", "the writer", "the composer",
           "the supporting cast", "the villain", "the young star"]
_ASPECT = ["acting", "plot", "music", "dialogue", "ending", "pacing", "camera work", "script",
           "story", "cast"]
_WORDS = {
    "pos": {
        "adj": ["wonderful", "brilliant", "moving", "beautiful", "clever", "superb", "gripping",
                "charming", "powerful", "delightful"],
        "verb": ["loved", "enjoyed", "adored", "admired", "treasured"],
        "feel": ["happy", "inspired", "amazed", "delighted", "thrilled"],
        "adv": ["truly", "really", "wonderfully", "simply", "deeply"],
        "close": ["A must see.", "Highly recommended.", "I will watch it again.",
                  "Go and see it.", "One of the best this year."],
        "ratings": [7, 8, 9, 10],
    },
    "neg": {
        "adj": ["terrible", "boring", "awful", "dull", "clumsy", "weak", "painful", "silly",
                "lifeless", "messy"],
        "verb": ["hated", "disliked", "regretted", "endured", "resented"],
        "feel": ["bored", "annoyed", "tired", "disappointed", "angry"],
        "adv": ["truly", "really", "painfully", "simply", "utterly"],
        "close": ["Avoid it.", "Not recommended.", "I want my money back.",
                  "Skip this one.", "One of the worst this year."],
        "ratings": [1, 2, 3, 4],
    },
}

_TEMPLATES = [
    "The {aspect} was {adv} {adj}.",
    "I {verb} every minute of {title}.",
    "{Person} did a {adj} job and the {aspect} felt {adj}.",
    "As a {genre}, {title} is {adv} {adj}.",
    "By the end I felt {feel}.",
    "The {aspect} and the {aspect2} were both {adj}.",
    "My friends {verb} it too, and they felt {feel}.",
    "Honestly, {title} made me feel {feel}.",
    "I thought {person} was {adj} in every scene.",
    "The {aspect} is the most {adj} part of {title}.",
]


def _review(rng: random.Random) -> str:
    mood = rng.choice(["pos", "neg"])
    w = _WORDS[mood]
    title = f"The {rng.choice(_TITLE_ADJ)} {rng.choice(_TITLE_NOUN)}"
    genre = rng.choice(_GENRE)
    opener = f"I watched {title} last {rng.choice(['night', 'week', 'weekend', 'month'])}."
    body = [opener, f"It is a {genre} and it is {w['adv'][0]} {rng.choice(w['adj'])}."]
    for tpl in rng.sample(_TEMPLATES, rng.randint(3, 6)):
        person = rng.choice(_PERSON)
        a1, a2 = rng.sample(_ASPECT, 2)
        body.append(tpl.format(aspect=a1, aspect2=a2, adv=rng.choice(w["adv"]), adj=rng.choice(w["adj"]),
                               verb=rng.choice(w["verb"]), feel=rng.choice(w["feel"]), title=title,
                               genre=genre, person=person, Person=person[0].upper() + person[1:]))
    body.append(rng.choice(w["close"]))
    body.append(f"I give {title} {rng.choice(w['ratings'])} out of 10.")
    return " ".join(body)


def generate(n_docs: int = DEFAULT_DOCS, seed: int = DEFAULT_SEED) -> str:
    rng = random.Random(seed)
    return "\n\n".join(_review(rng) for _ in range(n_docs)) + "\n"


def bundled_corpus_path() -> Path:
    return Path(str(resources.files("echoatt") / "corpus" / BUNDLED_NAME))


def main(argv=None) -> None:
    argv = sys.argv[1:] if argv is None else argv
    out = Path(argv[0]) if argv else bundled_corpus_path()
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(generate(), encoding="utf-8")
    print(f"wrote {out} ({out.stat().st_size} bytes)")


if __name__ == "__main__":
    main()
