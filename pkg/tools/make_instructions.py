"""Regenerate the bundled miniature instruction set (deterministic)."""

import json
import random
from pathlib import Path

CAPITALS = {
    "France": "Paris", "Italy": "Rome", "Spain": "Madrid", "Germany": "Berlin", "Japan": "Tokyo",
    "Egypt": "Cairo", "Peru": "Lima", "Norway": "Oslo", "Greece": "Athens", "Kenya": "Nairobi",
    "Canada": "Ottawa", "Chile": "Santiago", "Cuba": "Havana", "Poland": "Warsaw", "Ireland": "Dublin",
    "Austria": "Vienna", "Sweden": "Stockholm", "Portugal": "Lisbon", "Russia": "Moscow", "China": "Beijing",
    "India": "New Delhi", "Mexico": "Mexico City", "Turkey": "Ankara", "Finland": "Helsinki",
    "Denmark": "Copenhagen", "Hungary": "Budapest", "Belgium": "Brussels", "Iran": "Tehran",
    "Thailand": "Bangkok", "Argentina": "Buenos Aires",
}
PLAYS = {
    "Hamlet": "William Shakespeare", "Macbeth": "William Shakespeare", "King Lear": "William Shakespeare",
    "Othello": "William Shakespeare", "The Tempest": "William Shakespeare",
    "Romeo and Juliet": "William Shakespeare", "Twelfth Night": "William Shakespeare",
    "Don Quixote": "Miguel de Cervantes", "Faust": "Johann Wolfgang von Goethe",
    "The Odyssey": "Homer", "The Iliad": "Homer", "Paradise Lost": "John Milton",
    "Pride and Prejudice": "Jane Austen", "Emma": "Jane Austen", "Oliver Twist": "Charles Dickens",
    "Moby Dick": "Herman Melville", "The Divine Comedy": "Dante Alighieri",
}
ANTONYMS = [("hot", "cold"), ("up", "down"), ("early", "late"), ("light", "dark"), ("old", "new"),
            ("fast", "slow"), ("big", "small"), ("happy", "sad"), ("open", "closed"), ("rich", "poor"),
            ("wet", "dry"), ("hard", "soft"), ("high", "low"), ("love", "hate"), ("true", "false"),
            ("day", "night"), ("first", "last"), ("strong", "weak"), ("empty", "full"), ("near", "far"),
            ("loud", "quiet"), ("win", "lose"), ("give", "take"), ("young", "old"), ("good", "bad")]
WORDS = ["king", "queen", "sword", "crown", "horse", "ring", "stone", "river", "tower", "night",
         "storm", "grave", "letter", "garden", "castle", "moon", "star", "heart", "blood", "ghost",
         "honour", "field", "ship", "sea", "wind", "fire", "bell", "book", "glove", "mask"]
IRREGULAR = {"man": "men", "woman": "women", "child": "children", "mouse": "mice", "foot": "feet",
             "tooth": "teeth", "goose": "geese", "knife": "knives", "wife": "wives", "leaf": "leaves"}


def plural(w: str) -> str:
    if w in IRREGULAR:
        return IRREGULAR[w]
    if w.endswith(("s", "sh", "ch", "x")):
        return w + "es"
    return w + "s"


def build(rng: random.Random):
    out = []
    for c, cap in CAPITALS.items():
        out.append({"instruction": f"What is the capital of {c}?", "input": "", "output": f"{cap}."})
    for play, author in PLAYS.items():
        out.append({"instruction": f"Who wrote {play}?", "input": "", "output": f"{author}."})
    for a, b in ANTONYMS:
        out.append({"instruction": "Give the opposite of the word.", "input": a, "output": b})
        out.append({"instruction": "Give the opposite of the word.", "input": b, "output": a})
    for w in WORDS + list(IRREGULAR):
        out.append({"instruction": "Write the plural.", "input": w, "output": plural(w)})
    for w in WORDS:
        out.append({"instruction": "Convert to uppercase.", "input": w, "output": w.upper()})
        out.append({"instruction": "Reverse the word.", "input": w, "output": w[::-1]})
        out.append({"instruction": "Repeat the word three times.", "input": w, "output": " ".join([w] * 3)})
        out.append({"instruction": "What is the first letter?", "input": w, "output": w[0]})
        out.append({"instruction": "How many letters?", "input": w, "output": str(len(w))})
    for _ in range(173):
        a, b = rng.randint(0, 50), rng.randint(0, 49)
        out.append({"instruction": "Add the numbers.", "input": f"{a} + {b}", "output": str(a + b)})
    for _ in range(40):
        a, b = rng.randint(10, 99), rng.randint(0, 9)
        out.append({"instruction": "Subtract the numbers.", "input": f"{a} - {b}", "output": str(a - b)})
    rng.shuffle(out)
    return out


if __name__ == "__main__":
    target = Path(__file__).resolve().parents[1] / "src" / "qlrec" / "data" / "instructions.jsonl"
    rows = build(random.Random(0))
    target.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    print(f"wrote {len(rows)} samples to {target}")
