#!/usr/bin/env python3
"""Regenerates include/sentiscope/unicode_tables.hpp.

Classes are taken from the `regex` module because that is what the reference
GPT-2 tokenizer uses for its pre-tokenization pattern.
"""
import sys

import regex

CLASSES = {
    "letter": regex.compile(r"\p{L}"),
    "number": regex.compile(r"\p{N}"),
    "space": regex.compile(r"\s"),
}


def ranges(pattern):
    out = []
    start = None
    for cp in range(0x110000):
        if 0xD800 <= cp <= 0xDFFF:
            hit = False
        else:
            hit = pattern.match(chr(cp)) is not None
        if hit and start is None:
            start = cp
        elif not hit and start is not None:
            out.append((start, cp - 1))
            start = None
    if start is not None:
        out.append((start, 0x10FFFF))
    return out


def main(path):
    lines = [
        "// Generated by scripts/gen_unicode_tables.py from the python `regex` module",
        f"// (version {regex.__version__}). Do not edit by hand.",
        "#pragma once",
        "",
        "#include <array>",
        "#include <cstdint>",
        "",
        "namespace sentiscope::unicode_tables {",
        "",
        "struct range {",
        "    std::uint32_t first;",
        "    std::uint32_t last;",
        "};",
        "",
    ]
    for name, pattern in CLASSES.items():
        rs = ranges(pattern)
        lines.append(f"inline constexpr std::array<range, {len(rs)}> {name}_ranges{{{{")
        for i in range(0, len(rs), 4):
            chunk = ", ".join(f"{{0x{a:X}, 0x{b:X}}}" for a, b in rs[i:i + 4])
            lines.append(f"    {chunk},")
        lines.append("}};")
        lines.append("")
    lines.append("}  // namespace sentiscope::unicode_tables")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "include/sentiscope/unicode_tables.hpp")
