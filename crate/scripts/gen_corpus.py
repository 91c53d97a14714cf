#!/usr/bin/env python3
"""Generate the bundled sample corpus.

Writes deterministic, lowercase ASCII text mixing three line types:
ledger lines that repeat a name, a number and an item later in the line,
short descriptive sentences from a small grammar, and list lines that
count items. Usage: gen_corpus.py [--seed N] [--lines N] OUT
"""

import argparse
import random

NAMES = ["mara", "oskar", "lena", "tobias", "ines", "felix", "greta", "jonas",
         "ada", "milo", "rosa", "emil", "nora", "paul", "vera", "anton"]
ITEMS = ["figs", "pears", "coins", "books", "nails", "lamps", "shells", "seeds",
         "cups", "keys", "stones", "ropes"]
ADJ = ["quiet", "old", "small", "bright", "cold", "green", "narrow", "tall"]
NOUNS = ["river", "mill", "road", "house", "field", "bridge", "garden", "tower"]
VERBS = ["runs past", "stands near", "leads to", "looks over", "lies behind"]
ENDINGS = ["and nobody minds.", "as it always has.", "in the morning.",
           "when the wind turns.", "until the evening."]


def ledger(rng):
    a, b = rng.sample(NAMES, 2)
    n = rng.randint(2, 99)
    item = rng.choice(ITEMS)
    return f"ledger {rng.randint(0, 9999):04d}: {a} gave {n} {item} to {b}. {b} now has {n} {item}."


def sentence(rng):
    adj, noun = rng.choice(ADJ), rng.choice(NOUNS)
    other = rng.choice(NOUNS)
    return f"the {adj} {noun} {rng.choice(VERBS)} the {other} {rng.choice(ENDINGS)}"


def listing(rng):
    item = rng.choice(ITEMS)
    k = rng.randint(2, 5)
    words = ["one", "two", "three", "four", "five"]
    return f"{rng.choice(NAMES)} counts {item}: " + ", ".join(words[:k]) + f". that makes {words[k - 1]} {item}."


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--lines", type=int, default=6000)
    args = ap.parse_args()
    rng = random.Random(args.seed)
    kinds = [ledger, ledger, sentence, listing]
    with open(args.out, "w", encoding="ascii", newline="\n") as f:
        for _ in range(args.lines):
            f.write(rng.choice(kinds)(rng) + "\n")


if __name__ == "__main__":
    main()
