"""Expert-routing analysis: per-language activation vectors, distances, correlation.

For each language we count how many tokens each (MoE layer, expert) slot
received, giving one non-negative vector per language. Distances between
unit-normalized vectors, divided by sqrt(2), land in [0, 1] and can be
compared against reference language-distance matrices (family trees,
synthetic ground truth) via Pearson correlation over the strict upper
triangle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .fileio import atomic_write_text
from .tensor import no_grad


@dataclass
class ActivationVector:
    """Token counts per (layer, expert) slot, layer-major, for one language."""

    lang: str
    counts: np.ndarray
    tokens_processed: int
    n_experts: int

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 1 or len(self.counts) % self.n_experts != 0:
            raise ShapeError(
                f"counts length {self.counts.shape} is not a multiple of n_experts={self.n_experts}")
        if (self.counts < 0).any():
            raise ValueError(f"negative activation count for language {self.lang!r}")

    @property
    def n_layers(self) -> int:
        return len(self.counts) // self.n_experts


@dataclass
class DistanceMatrix:
    """Symmetric pairwise language distances in [0, 1] with a zero diagonal."""

    codes: list[str]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        n = len(self.codes)
        if len(set(self.codes)) != n:
            raise ValueError("duplicate language codes in distance matrix")
        if self.values.shape != (n, n):
            raise ShapeError(f"matrix shape {self.values.shape} does not match {n} codes")
        if not np.allclose(self.values, self.values.T, atol=1e-12, rtol=0):
            raise ValueError("distance matrix is not symmetric")
        if (np.diag(self.values) != 0).any():
            raise ValueError("distance matrix diagonal must be exactly zero")
        if self.values.min() < 0 or self.values.max() > 1:
            raise ValueError("distance matrix entries must lie in [0, 1]")

    def restrict(self, codes: list[str]) -> "DistanceMatrix":
        idx = [self.codes.index(c) for c in codes]
        return DistanceMatrix(list(codes), self.values[np.ix_(idx, idx)])


def collect_activations(model, tokenizer, docs, sequences_per_lang: int, seq_len: int,
                        seed: int, languages: list[str] | None = None,
                        chunk: int = 16) -> list[ActivationVector]:
    """Count routed tokens per (layer, expert) slot for each language.

    Runs forward passes only: no parameter is touched. Deterministic for a
    given seed; each language draws from its own substream.
    """
    from .corpus import pack_sequences

    present = sorted({d.lang for d in docs})
    if languages is None:
        languages = present
    for lang in languages:
        if lang not in present:
            raise ValueError(f"language {lang!r} not present in corpus")
    n_experts = model.config.n_experts
    vectors = []
    for lang in languages:
        rng = np.random.default_rng([seed, present.index(lang)])
        lang_docs = [d for d in docs if d.lang == lang]
        seqs = pack_sequences(lang_docs, sequences_per_lang, seq_len, tokenizer, rng)
        seqs = seqs[:, :seq_len]  # routing needs inputs only, no shifted targets
        counts = None
        for start in range(0, len(seqs), chunk):
            with no_grad():
                out = model.forward(seqs[start:start + chunk])
            if counts is None:
                counts = np.zeros(len(out.moe_stats) * n_experts, dtype=np.int64)
            for layer, stats in enumerate(out.moe_stats):
                counts[layer * n_experts:(layer + 1) * n_experts] += np.bincount(
                    stats.selected, minlength=n_experts)
        vectors.append(ActivationVector(lang, counts, sequences_per_lang * seq_len, n_experts))
    return vectors


def _stack(vectors: list[ActivationVector]) -> np.ndarray:
    dims = {len(v.counts) for v in vectors}
    if len(dims) > 1:
        raise ShapeError(f"activation vectors disagree in dimensionality: {sorted(dims)}")
    return np.array([v.counts for v in vectors], dtype=np.float64)


def heatmap_rows(vectors: list[ActivationVector]) -> np.ndarray:
    """Scale each layer's expert block to unit Euclidean norm (zero blocks stay zero)."""
    rows = _stack(vectors)
    n = vectors[0].n_experts
    out = np.zeros_like(rows)
    for layer in range(vectors[0].n_layers):
        block = rows[:, layer * n:(layer + 1) * n]
        norms = np.linalg.norm(block, axis=1, keepdims=True)
        np.divide(block, norms, out=out[:, layer * n:(layer + 1) * n], where=norms > 0)
    return out


def distance_matrix(vectors: list[ActivationVector]) -> DistanceMatrix:
    """Unit-normalize each vector, then d(u, v) = |u - v| / sqrt(2) in [0, 1]."""
    if len(vectors) < 2:
        raise ValueError(f"need at least 2 languages, got {len(vectors)}")
    rows = _stack(vectors)
    norms = np.linalg.norm(rows, axis=1)
    for v, norm in zip(vectors, norms):
        if norm == 0:
            raise ValueError(f"activation vector for language {v.lang!r} is all zero")
    unit = rows / norms[:, None]
    diff = unit[:, None, :] - unit[None, :, :]
    values = np.linalg.norm(diff, axis=2) / math.sqrt(2.0)
    values = np.clip((values + values.T) / 2.0, 0.0, 1.0)
    np.fill_diagonal(values, 0.0)
    return DistanceMatrix([v.lang for v in vectors], values)


def pearson(a: DistanceMatrix, b: DistanceMatrix) -> float:
    """Pearson r between the strict upper triangles, on the common languages."""
    common = sorted(set(a.codes) & set(b.codes))
    if len(common) < 3:
        raise ValueError(f"need at least 3 common languages, got {len(common)}")
    sub_a = a.restrict(common).values
    sub_b = b.restrict(common).values
    iu = np.triu_indices(len(common), k=1)
    x, y = sub_a[iu], sub_b[iu]
    dx, dy = x - x.mean(), y - y.mean()
    vx, vy = float(dx @ dx), float(dy @ dy)
    if vx == 0.0 or vy == 0.0:
        raise ValueError("degenerate input: a distance triangle has zero variance")
    return float(np.clip((dx @ dy) / math.sqrt(vx * vy), -1.0, 1.0))


def filter_languages(vectors: list[ActivationVector], counts: dict[str, int],
                     threshold: float) -> list[ActivationVector]:
    """Keep languages whose document count reaches the threshold, order preserved."""
    for v in vectors:
        if v.lang not in counts:
            raise ValueError(f"no document count for language {v.lang!r}")
    return [v for v in vectors if counts[v.lang] >= threshold]


def correlation_sweep(vectors: list[ActivationVector], reference: DistanceMatrix,
                      counts: dict[str, int],
                      thresholds: list[float]) -> list[tuple[float, int, float | None]]:
    """One (threshold, n_languages, r) row per threshold; r is None when fewer
    than 3 common languages survive the filter."""
    if list(thresholds) != sorted(thresholds):
        raise ValueError("thresholds must be sorted ascending")
    ref_codes = set(reference.codes)
    rows: list[tuple[float, int, float | None]] = []
    for thr in thresholds:
        kept = [v for v in filter_languages(vectors, counts, thr) if v.lang in ref_codes]
        if len(kept) < 3:
            rows.append((thr, len(kept), None))
            continue
        rows.append((thr, len(kept), pearson(distance_matrix(kept), reference)))
    return rows


# -- TSV formats ---------------------------------------------------------------


def _slot_header(vectors: list[ActivationVector]) -> str:
    n = vectors[0].n_experts
    labels = [f"layer{layer}_expert{e}"
              for layer in range(vectors[0].n_layers) for e in range(n)]
    return "\t".join(["lang"] + labels)


def write_vectors_tsv(vectors: list[ActivationVector], path: str) -> None:
    lines = [_slot_header(vectors)]
    for v in vectors:
        lines.append("\t".join([v.lang] + [str(int(c)) for c in v.counts]))
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_heatmap_tsv(vectors: list[ActivationVector], path: str) -> None:
    rows = heatmap_rows(vectors)
    lines = [_slot_header(vectors)]
    for v, row in zip(vectors, rows):
        lines.append("\t".join([v.lang] + [f"{x:.6f}" for x in row]))
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_matrix_tsv(matrix: DistanceMatrix, path: str) -> None:
    lines = ["\t".join(["lang"] + matrix.codes)]
    for code, row in zip(matrix.codes, matrix.values):
        lines.append("\t".join([code] + [f"{x:.6f}" for x in row]))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_matrix_tsv(path: str) -> DistanceMatrix:
    from .errors import FormatError

    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("lang\t"):
        raise FormatError(f"{path}: expected a 'lang\\t<codes...>' header")
    codes = lines[0].split("\t")[1:]
    if len(lines) - 1 != len(codes):
        raise FormatError(f"{path}: {len(codes)} codes in header but {len(lines) - 1} rows")
    values = np.zeros((len(codes), len(codes)))
    for i, line in enumerate(lines[1:]):
        parts = line.split("\t")
        if parts[0] != codes[i] or len(parts) != len(codes) + 1:
            raise FormatError(f"{path}: row {i + 2} does not match the header ordering")
        try:
            values[i] = [float(x) for x in parts[1:]]
        except ValueError as exc:
            raise FormatError(f"{path}: row {i + 2}: {exc}") from exc
    values = np.clip((values + values.T) / 2.0, 0.0, 1.0)
    np.fill_diagonal(values, 0.0)
    return DistanceMatrix(codes, values)


def write_sweep_tsv(rows: list[tuple[float, int, float | None]], path: str) -> None:
    lines = ["threshold\tn_languages\tpearson_r"]
    for thr, n, r in rows:
        thr_s = str(int(thr)) if float(thr).is_integer() else repr(float(thr))
        lines.append(f"{thr_s}\t{n}\t" + ("NA" if r is None else f"{r:.6f}"))
    atomic_write_text(path, "\n".join(lines) + "\n")
