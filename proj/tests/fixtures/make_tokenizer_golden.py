#!/usr/bin/env python3
"""Writes tests/data/tokenizer_golden.jsonl: (text, ids) pairs from the
reference GPT-2 tokenizer (transformers' GPT2Tokenizer, which pre-tokenizes
with the `regex` module) run over the checked-in vocab/merges.

Strings come from a hand-written list, a seeded sample of odd Unicode, and
every sentence of the suites written by `sentiscope gen-suites` when suite
files are passed on the command line (so every template is covered).

    python3 tests/fixtures/make_tokenizer_golden.py build/bundle/suites/*.jsonl
"""
import json
import os
import random
import sys

from transformers import GPT2Tokenizer

HERE = os.path.dirname(os.path.abspath(__file__))
ROOT = os.path.abspath(os.path.join(HERE, "..", ".."))

HAND_WRITTEN = [
    "",
    " ",
    "  ",
    "\n",
    "a",
    "The movie was good",
    "The movie was not good",
    "The film was excellent",
    "The film was definitely not excellent",
    "Great, another meeting",
    "The horror movie was terrifying",
    "The meal was good",
    "The meal was extremely good",
    "I don't think it's not good",
    "incredible abysmal wonderful horrible",
    "utterly wonderful vs utterly awful",
    "better than expected, quite satisfying",
    "worse than expected, quite mediocre",
    "nice not nice are decent aren't decent",
    "was quite outstanding wasn't quite outstanding",
    "wasn't bad at all, actually decent",
    "horror movie was haunting romantic comedy was haunting",
    "Perfect, amazing weather. Perfect, decent weather.",
    "would have been outstanding if not for was outstanding despite",
    "incredibly pleasant a bit pleasant",
    "utterly very adequate just adequate",
    "extremely spectacular only slightly spectacular",
    "pleasant horrible",
    "Hello, world!",
    "It's, it'S, they're, we've, I'm, you'll, he'd",
    "'s't're've'm'll'd",
    "don't DON'T Don't",
    "trailing spaces   ",
    "   leading spaces",
    "multiple   inner    spaces",
    "tabs\tand\nnewlines\r\nmixed",
    "\n\n\nparagraph\n\n",
    "1234567890",
    "3.14159 and 2,718 and 1e10",
    "$100 (USD) - 50% off!!!",
    "email@example.com https://example.com/path?q=1",
    "C++ is not C#; neither is Objective-C.",
    "snake_case camelCase PascalCase kebab-case",
    "Café crème brûlée",
    "naïve coöperate résumé",
    "Ünïcödé ǅ ǈ",
    "日本語のテキスト",
    "中文文本测试",
    "한국어 텍스트",
    "Русский текст",
    "Ελληνικά",
    "עברית",
    "العربية",
    "हिन्दी",
    "emoji 😀😃😄 👍🏽 👨‍👩‍👧",
    "math ∑∫√∞ ≠ ≤ ≥",
    "arrows → ← ↑ ↓",
    "quotes “smart” ‘single’ «guillemets»",
    "ellipsis… em—dash en–dash",
    "non breaking thin　ideographic",
    "zero​width",
    "٣٤٥ Ⅻ ½ ²",
    "    ",
    " !",
    "!!!",
    "?!?",
    "...",
    "a.b.c",
    "The   end.",
    "x" * 40,
    "supercalifragilisticexpialidocious",
    "antidisestablishmentarianism",
    "The movie's plot wasn't bad, but the acting was.",
    "She said, \"It's fine.\"",
    "Mr. O'Neil's dog",
    "rock 'n' roll",
]

CHARSET = (
    [chr(c) for c in range(0x20, 0x7F)]
    + [" ", " ", " ", "\n", "\t"]
    + list("éüñßøåçÆŒœ")
    + list("日本語中文한국어")
    + list("∑√∞→“”—…")
    + ["😀", "👍", " ", " ", "٣", "½"]
)


def random_strings(n, seed=11):
    rnd = random.Random(seed)
    out = []
    for _ in range(n):
        length = rnd.randint(1, 24)
        out.append("".join(rnd.choice(CHARSET) for _ in range(length)))
    return out


def suite_strings(paths):
    seen = []
    for path in paths:
        with open(path, encoding="utf-8") as f:
            for line in f:
                rec = json.loads(line)
                for key in ("clean", "corrupted", "text"):
                    if key in rec:
                        seen.append(rec[key])
    return seen


def templates_cover(strings, paths):
    """One clean/corrupted pair per template id, plus every probe frame."""
    chosen = []
    seen_templates = set()
    for path in paths:
        with open(path, encoding="utf-8") as f:
            for line in f:
                rec = json.loads(line)
                key = rec.get("template_id")
                if key is None or key in seen_templates:
                    continue
                seen_templates.add(key)
                for field in ("clean", "corrupted", "text"):
                    if field in rec:
                        chosen.append(rec[field])
    return chosen


def main(paths):
    tok = GPT2Tokenizer(os.path.join(ROOT, "data", "gpt2", "vocab.json"),
                        os.path.join(ROOT, "data", "gpt2", "merges.txt"))
    strings = list(HAND_WRITTEN) + random_strings(60) + templates_cover(suite_strings(paths), paths)
    unique = list(dict.fromkeys(strings))
    out_path = os.path.join(ROOT, "tests", "data", "tokenizer_golden.jsonl")
    os.makedirs(os.path.dirname(out_path), exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as f:
        for s in unique:
            ids = tok.encode(s) if s else []
            f.write(json.dumps({"text": s, "ids": ids}, ensure_ascii=False) + "\n")
    print(f"wrote {len(unique)} golden pairs to {out_path}")


if __name__ == "__main__":
    main(sys.argv[1:])
