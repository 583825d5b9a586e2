"""Multilingual corpus ingestion, batching, and a synthetic family generator.

The synthetic generator builds ground truth for the routing analysis: each
family owns a disjoint character alphabet, each language is a perturbed
sample of its family's symbol distribution, and the returned truth matrix
puts related languages at distance 0.2 and unrelated ones at 1.0.
"""

from __future__ import annotations

import json
import re
import string
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .analysis import DistanceMatrix
from .errors import FormatError
from .fileio import atomic_write_text
from .tokenizer import BOS_ID, EOS_ID

_LANG_RE = re.compile(r"[a-z]{2,8}")

FAMILY_ALPHABET_SIZE = 12
_LANG_NOISE = 0.35
# disjoint per-family alphabets are carved from this pool in order
_SYMBOL_POOL = (string.ascii_lowercase + string.ascii_uppercase + string.digits
                + "".join(chr(c) for c in range(0x3B1, 0x3C9))   # Greek lowercase
                + "".join(chr(c) for c in range(0x430, 0x450)))  # Cyrillic lowercase


@dataclass
class Document:
    lang: str
    text: str


@dataclass
class CorpusStats:
    counts: dict[str, int] = field(default_factory=dict)
    total: int = 0


def _normalize_lang(raw, where: str) -> str:
    if not isinstance(raw, str):
        raise FormatError(f"{where}: 'lang' must be a string, got {type(raw).__name__}")
    lang = raw.lower()
    if not _LANG_RE.fullmatch(lang):
        raise FormatError(f"{where}: language code {raw!r} does not match [a-z]{{2,8}}")
    return lang


def load_jsonl(path: str) -> tuple[list[Document], CorpusStats]:
    """Read `{"lang": ..., "text": ...}` objects, one per line, in file order."""
    docs: list[Document] = []
    counts: Counter[str] = Counter()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}: line {lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{where}: invalid JSON: {exc.msg}") from exc
            if not isinstance(obj, dict):
                raise FormatError(f"{where}: expected a JSON object")
            missing = {"lang", "text"} - set(obj)
            if missing:
                raise FormatError(f"{where}: missing field(s) {sorted(missing)}")
            if not isinstance(obj["text"], str):
                raise FormatError(f"{where}: 'text' must be a string")
            lang = _normalize_lang(obj["lang"], where)
            docs.append(Document(lang, obj["text"]))
            counts[lang] += 1
    return docs, CorpusStats(dict(counts), len(docs))


def write_jsonl(docs: list[Document], path: str) -> None:
    lines = [json.dumps({"lang": d.lang, "text": d.text}, ensure_ascii=False) for d in docs]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def doc_counts(stats: CorpusStats) -> dict[str, int]:
    """Per-language document counts, languages sorted; unknown languages read as 0."""
    return {lang: stats.counts[lang] for lang in sorted(stats.counts)}


def write_doc_counts_tsv(counts: dict[str, int], path: str) -> None:
    rows = ["lang\tcount"] + [f"{lang}\t{counts[lang]}" for lang in sorted(counts)]
    atomic_write_text(path, "\n".join(rows) + "\n")


def read_doc_counts_tsv(path: str) -> dict[str, int]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0].split("\t") != ["lang", "count"]:
        raise FormatError(f"{path}: expected header 'lang\\tcount'")
    out: dict[str, int] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != 2 or not parts[1].lstrip("-").isdigit():
            raise FormatError(f"{path}: line {lineno}: expected 'lang\\tcount'")
        out[parts[0]] = int(parts[1])
    return out


def pack_sequences(docs: list[Document], n_sequences: int, seq_len: int, tokenizer,
                   rng: np.random.Generator) -> np.ndarray:
    """Pack sampled documents into fixed-length rows of seq_len + 1 token ids.

    Documents are drawn language-proportionally (a language's weight is its
    document count), wrapped in bos/eos, concatenated, and truncated.
    """
    langs = sorted({d.lang for d in docs})
    by_lang = {lang: [d for d in docs if d.lang == lang] for lang in langs}
    weights = np.array([len(by_lang[lang]) for lang in langs], dtype=np.float64)
    weights /= weights.sum()
    rows = np.empty((n_sequences, seq_len + 1), dtype=np.int64)
    for r in range(n_sequences):
        ids: list[int] = []
        while len(ids) < seq_len + 1:
            lang = langs[int(rng.choice(len(langs), p=weights))]
            doc = by_lang[lang][int(rng.integers(len(by_lang[lang])))]
            ids.append(BOS_ID)
            ids.extend(tokenizer.encode(doc.text))
            ids.append(EOS_ID)
        rows[r] = ids[:seq_len + 1]
    return rows


def sample_batch(docs: list[Document], batch_size: int, seq_len: int, tokenizer,
                 seed: int, step: int) -> np.ndarray:
    """Deterministic training batch: a pure function of (seed, step).

    Returns a (batch_size, seq_len + 1) id array; the trainer shifts it into
    inputs and next-token targets.
    """
    if not docs:
        raise ValueError("cannot sample from an empty corpus")
    if batch_size < 1 or seq_len < 1:
        raise ValueError(f"batch_size and seq_len must be positive, got {batch_size}, {seq_len}")
    if seed < 0 or step < 0:
        raise ValueError(f"seed and step must be non-negative, got {seed}, {step}")
    rng = np.random.default_rng([seed, step])
    return pack_sequences(docs, batch_size, seq_len, tokenizer, rng)


def synth_corpus(n_families: int, langs_per_family: int, docs_per_lang: int,
                 doc_len: int, seed: int) -> tuple[list[Document], DistanceMatrix]:
    """Generate a family-structured corpus plus its ground-truth distance matrix.

    Family f uses symbols _SYMBOL_POOL[f*12:(f+1)*12] only, so family
    alphabets never overlap. Language codes are two letters: family then
    member (family 0 -> "aa", "ab", ...).
    """
    for name, val in (("n_families", n_families), ("langs_per_family", langs_per_family),
                      ("docs_per_lang", docs_per_lang), ("doc_len", doc_len)):
        if val < 1:
            raise ValueError(f"{name} must be positive, got {val}")
    if n_families * FAMILY_ALPHABET_SIZE > len(_SYMBOL_POOL):
        raise ValueError(f"at most {len(_SYMBOL_POOL) // FAMILY_ALPHABET_SIZE} families supported")
    if langs_per_family > 26 or n_families > 26:
        raise ValueError("language codes support at most 26 families of 26 languages")

    rng = np.random.default_rng(seed)
    docs: list[Document] = []
    codes: list[str] = []
    families: list[int] = []
    for f in range(n_families):
        alphabet = _SYMBOL_POOL[f * FAMILY_ALPHABET_SIZE:(f + 1) * FAMILY_ALPHABET_SIZE]
        base = rng.dirichlet(np.full(FAMILY_ALPHABET_SIZE, 1.5))
        for member in range(langs_per_family):
            code = string.ascii_lowercase[f] + string.ascii_lowercase[member]
            codes.append(code)
            families.append(f)
            dist = base * np.exp(_LANG_NOISE * rng.standard_normal(FAMILY_ALPHABET_SIZE))
            dist /= dist.sum()
            for _ in range(docs_per_lang):
                symbols = rng.choice(FAMILY_ALPHABET_SIZE, size=doc_len, p=dist)
                docs.append(Document(code, "".join(alphabet[s] for s in symbols)))

    n = len(codes)
    truth = np.ones((n, n))
    for i in range(n):
        for j in range(n):
            if i == j:
                truth[i, j] = 0.0
            elif families[i] == families[j]:
                truth[i, j] = 0.2
    return docs, DistanceMatrix(codes, truth)
