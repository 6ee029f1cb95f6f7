#!/usr/bin/env python3
"""Build data/shakespeare.txt from the Gutenberg play texts bundled in the
`shakespeare` 0.6 source distribution on PyPI.

Output format follows the common character-level Shakespeare layout:
speaker line "NAME:", speech lines, blank line between turns. Stage
directions, act/scene headings and the dramatis personae are dropped.

    python3 scripts/build_corpus.py [--sdist PATH] [--out data/shakespeare.txt]
"""
import argparse
import io
import re
import tarfile
import urllib.request

SDIST_URL = (
    "https://files.pythonhosted.org/packages/a4/45/"
    "699c3869c2590579d0ef89df3cbd28b17eb77a14dd9f1841c51cd7d4dc1c/shakespeare-0.6.tar.gz"
)
PLAYS = [
    "coriolanus", "richard_iii", "richard_ii", "romeo_and_juliet", "henry_vi_part_3",
    "winters_tale", "measure_for_measure", "taming_of_the_shrew", "tempest",
    "julius_caesar", "macbeth", "hamlet", "lear", "othello",
]
TARGET_CHARS = 1_115_000
SPEAKER = re.compile(r"^([A-Z][A-Z0-9 ,'&-]*[A-Z])\.\s*$")
HEADING = re.compile(r"^(ACT [IVX0-9]+\.?.*|SCENE [IVX0-9]+\.?.*|Scene [IVX0-9]+\..*|THE END\.?)$")
FIRST_ACT = re.compile(r"^(ACT (I|1)\b|SCENE I\.)")
KEEP = set("\n !$&',-.3:;?") | set(map(chr, range(65, 91))) | set(map(chr, range(97, 123)))


def clean_play(text):
    lines = [l.rstrip() for l in text.splitlines()]
    start = next(i for i, l in enumerate(lines) if FIRST_ACT.match(l.strip()))
    out, in_direction = [], False
    for line in lines[start:]:
        s = line.strip()
        if in_direction:
            if "]" in s:
                in_direction = False
            continue
        if s.startswith("["):
            in_direction = "]" not in s
            continue
        if HEADING.match(s):
            continue
        s = re.sub(r"\[[^\]]*\]", "", s).strip()
        m = SPEAKER.match(s)
        if m:
            if out and out[-1] != "":
                out.append("")
            out.append(m.group(1) + ":")
            continue
        s = s.replace('"', "'").replace("--", " -- ")
        s = "".join(c for c in s if c in KEEP)
        s = re.sub(r" +", " ", s).strip()
        if s == "":
            if out and out[-1] != "":
                out.append("")
            continue
        out.append(s)
    while out and out[-1] == "":
        out.pop()
    return "\n".join(out) + "\n"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sdist")
    ap.add_argument("--out", default="data/shakespeare.txt")
    args = ap.parse_args()
    if args.sdist:
        raw = open(args.sdist, "rb").read()
    else:
        raw = urllib.request.urlopen(SDIST_URL).read()
    tar = tarfile.open(fileobj=io.BytesIO(raw), mode="r:gz")
    pieces, total = [], 0
    for play in PLAYS:
        name = f"shakespeare-0.6/shksprdata/texts/{play}_gut.txt"
        text = tar.extractfile(name).read().decode("latin-1")
        cleaned = clean_play(text)
        pieces.append(cleaned)
        total += len(cleaned) + 1
        if total >= TARGET_CHARS:
            break
    corpus = "\n".join(pieces)[:TARGET_CHARS]
    corpus = corpus[: corpus.rfind("\n\n") + 1]
    with open(args.out, "w", encoding="ascii") as f:
        f.write(corpus)
    print(f"wrote {len(corpus)} chars, vocab {len(set(corpus))} to {args.out}")


if __name__ == "__main__":
    main()
