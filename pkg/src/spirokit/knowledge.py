"""Guideline knowledge base: chunking, BM25 retrieval, query composition.

Scoring is classic BM25 (k1 = 1.2, b = 0.75) over lowercased alphanumeric
tokens with the nonnegative idf variant

    idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5))

so every score term can be recomputed by hand.  Ties break on ascending
chunk id.  The index is immutable once built and can be persisted to a
single JSON file.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path

from .errors import EmptyCorpus
from .metrics import GoldThresholds, PftMetrics, gold_stage, is_obstructed

BM25_K1 = 1.2
BM25_B = 0.75
DEFAULT_CHUNK_TOKENS = 250
DEFAULT_OVERLAP_TOKENS = 50
DEFAULT_TOP_K = 4

_TOKEN_RE = re.compile(r"[a-z0-9]+")
_HEADING_RE = re.compile(r"^(#{1,6})\s+(.*)$")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Chunk:
    chunk_id: int
    source_doc: str
    section_path: str
    text: str


@dataclass(frozen=True)
class KnowledgeSnippet:
    chunk_id: int
    text: str
    section_path: str
    score: float


class KnowledgeIndex:
    def __init__(self, chunks: list[Chunk]):
        if not chunks:
            raise EmptyCorpus("no chunks to index")
        self.chunks = list(chunks)
        self.term_counts = [self._count(tokenize(c.text)) for c in self.chunks]
        self.lengths = [sum(tc.values()) for tc in self.term_counts]
        self.avg_length = sum(self.lengths) / len(self.lengths)
        self.doc_freq: dict[str, int] = {}
        for tc in self.term_counts:
            for term in tc:
                self.doc_freq[term] = self.doc_freq.get(term, 0) + 1

    @staticmethod
    def _count(tokens: list[str]) -> dict[str, int]:
        counts: dict[str, int] = {}
        for tok in tokens:
            counts[tok] = counts.get(tok, 0) + 1
        return counts

    def idf(self, term: str) -> float:
        n = len(self.chunks)
        df = self.doc_freq.get(term, 0)
        return math.log(1.0 + (n - df + 0.5) / (df + 0.5))

    def score(self, query_tokens: list[str], chunk_index: int) -> float:
        tc = self.term_counts[chunk_index]
        norm = 1.0 - BM25_B + BM25_B * self.lengths[chunk_index] / self.avg_length
        total = 0.0
        for term in query_tokens:
            tf = tc.get(term, 0)
            if tf == 0:
                continue
            total += self.idf(term) * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * norm)
        return total

    # --- persistence ---

    def save(self, path: str | Path) -> None:
        payload = {
            "format": "spirokit-knowledge-index/1",
            "chunks": [{"chunk_id": c.chunk_id, "source_doc": c.source_doc,
                        "section_path": c.section_path, "text": c.text}
                       for c in self.chunks],
        }
        Path(path).write_text(json.dumps(payload))

    @classmethod
    def load(cls, path: str | Path) -> "KnowledgeIndex":
        payload = json.loads(Path(path).read_text())
        chunks = [Chunk(**c) for c in payload["chunks"]]
        return cls(chunks)


def _split_paragraphs(text: str) -> list[tuple[str, str]]:
    """(section_path, paragraph) pairs; section path tracks markdown headings."""
    headings: list[tuple[int, str]] = []
    out = []
    for block in re.split(r"\n\s*\n", text):
        block = block.strip()
        if not block:
            continue
        match = _HEADING_RE.match(block.splitlines()[0])
        if match:
            level = len(match.group(1))
            headings = [h for h in headings if h[0] < level]
            headings.append((level, match.group(2).strip()))
            rest = "\n".join(block.splitlines()[1:]).strip()
            if not rest:
                continue
            block = rest
        out.append((" > ".join(h[1] for h in headings), block))
    return out


def _window_spans(n_tokens: int, chunk_tokens: int, overlap_tokens: int):
    stride = chunk_tokens - overlap_tokens
    start = 0
    while True:
        end = min(start + chunk_tokens, n_tokens)
        yield start, end
        if end == n_tokens:
            return
        start += stride


def ingest(documents: list[str | Path], chunk_tokens: int = DEFAULT_CHUNK_TOKENS,
           overlap_tokens: int = DEFAULT_OVERLAP_TOKENS) -> KnowledgeIndex:
    """Chunk text/markdown files into an index.

    Whole paragraphs are packed into chunks up to chunk_tokens; a paragraph
    longer than the budget is split by a sliding token window with the
    configured overlap.
    """
    if not chunk_tokens > overlap_tokens >= 0:
        raise ValueError("need chunk_tokens > overlap_tokens >= 0")
    if not documents:
        raise EmptyCorpus("no documents supplied")
    chunks: list[Chunk] = []
    next_id = 0

    def emit(doc_name: str, section: str, text: str):
        nonlocal next_id
        text = text.strip()
        if not text:
            return
        chunks.append(Chunk(chunk_id=next_id, source_doc=doc_name,
                            section_path=section, text=text))
        next_id += 1

    for doc in documents:
        doc = Path(doc)
        doc_name = doc.name
        pending: list[str] = []
        pending_section = ""
        pending_tokens = 0

        def flush():
            nonlocal pending, pending_tokens
            if pending:
                emit(doc_name, pending_section, "\n\n".join(pending))
            pending = []
            pending_tokens = 0

        for section, para in _split_paragraphs(doc.read_text()):
            n_para = len(tokenize(para))
            if n_para > chunk_tokens:
                flush()
                spans = list(_window_spans(n_para, chunk_tokens, overlap_tokens))
                token_spans = [m.span() for m in _TOKEN_RE.finditer(para.lower())]
                for tok_start, tok_end in spans:
                    lo = token_spans[tok_start][0]
                    hi = token_spans[tok_end - 1][1]
                    emit(doc_name, section, para[lo:hi])
                pending_section = section
                continue
            if pending and (pending_tokens + n_para > chunk_tokens
                            or section != pending_section):
                flush()
            pending_section = section
            pending.append(para)
            pending_tokens += n_para
        flush()
    if not chunks:
        raise EmptyCorpus("documents contained no text")
    return KnowledgeIndex(chunks)


def retrieve(index: KnowledgeIndex, query: str, k: int = DEFAULT_TOP_K
             ) -> list[KnowledgeSnippet]:
    if k < 1:
        raise ValueError("k must be >= 1")
    query_tokens = tokenize(query)
    scored = [(index.score(query_tokens, i), c.chunk_id, i)
              for i, c in enumerate(index.chunks)]
    scored.sort(key=lambda item: (-item[0], item[1]))
    out = []
    for score, _, i in scored[:min(k, len(index.chunks))]:
        chunk = index.chunks[i]
        out.append(KnowledgeSnippet(chunk_id=chunk.chunk_id, text=chunk.text,
                                    section_path=chunk.section_path,
                                    score=score))
    return out


_SEVERITY_BANDS = ((80.0, "mild"), (50.0, "moderate"), (30.0, "severe"),
                   (float("-inf"), "very severe"))


def _severity_wording(percent_predicted: float) -> str:
    for cut, word in _SEVERITY_BANDS:
        if percent_predicted >= cut:
            return word
    return "very severe"


def compose_query(metrics: PftMetrics, morphology_text: str,
                  thresholds: GoldThresholds | None = None) -> str:
    """Composite retrieval query: morphology text plus templated metric facts."""
    thresholds = thresholds or GoldThresholds.bundled()
    measured = metrics.measured
    parts = [morphology_text.strip()]
    fev1_ref = metrics.reference.get("fev1")
    pct = fev1_ref.percent_predicted if fev1_ref else 100.0 * measured.ratio_fev1_fvc

    if is_obstructed(metrics, thresholds):
        band = _severity_wording(pct)
        parts.append(
            f"Airflow limitation present: FEV1/FVC ratio "
            f"{measured.ratio_fev1_fvc:.2f} below threshold; FEV1 "
            f"{pct:.0f} percent of predicted, {band} impairment band.")
        stage = gold_stage(pct, measured.ratio_fev1_fvc, thresholds)
        if stage is not None:
            parts.append(f"Severity grading consistent with stage {stage}.")
    else:
        parts.append(
            f"No airflow limitation: FEV1/FVC ratio "
            f"{measured.ratio_fev1_fvc:.2f} within normal limits; FEV1 "
            f"{pct:.0f} percent of predicted.")
    below = [name for name, ref in sorted(metrics.reference.items())
             if ref.z_score < -1.645]
    if below:
        parts.append("Metrics below the lower limit of normal: "
                     + ", ".join(below) + ".")
    parts.append("Diagnostic criteria, severity grading, treatment recommendations.")
    return " ".join(parts)
