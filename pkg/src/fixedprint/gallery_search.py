"""High-throughput 1:N identification and accuracy evaluation.

A gallery packs one unit-norm float32 template per row.  Search is an
exhaustive (exact) cosine scan: scores are accumulated in float64 and
rounded to float32 so that a gallery scan produces bit-identical scores
to the pairwise scorer in :mod:`fixedprint.template`.  Ties are broken
by lower gallery index, which makes results deterministic and
independent of how the scan is sharded across workers.

The evaluation helpers compute verification operating points
(threshold/TAR at requested FAR levels) and identification CMC curves.
"""

from __future__ import annotations

import struct
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import UnsupportedFarLevelError, ValidationError, FormatError
from .template import FixedTemplate, match_score
from ._io import atomic_write_bytes

try:  # optional: pins BLAS threads so the single-thread figure is honest
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover - present in the supported install
    threadpool_limits = None

GALLERY_MAGIC = b"FPGL"
GALLERY_VERSION = 1

# Row blocking for the scan: large enough to amortize call overhead,
# small enough that a block of float64 scores stays cache-friendly.
DEFAULT_BLOCK_ROWS = 8192

UNIT_NORM_TOL = 1e-4


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Gallery:
    """An immutable packed gallery of unit-norm templates.

    Attributes:
        ids: Subject identifier per row, unique, insertion order preserved.
        matrix: ``N x dim`` float32 array, one unit-norm template per row.
    """

    ids: tuple[str, ...]
    matrix: np.ndarray
    _matrix64: np.ndarray = field(init=False, repr=False, compare=False)
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        m = np.asarray(self.matrix)
        if m.ndim != 2 or m.dtype != np.float32:
            raise ValidationError("gallery matrix must be a 2-d float32 array")
        if m.shape[0] != len(self.ids):
            raise ValidationError(
                f"gallery has {len(self.ids)} ids but {m.shape[0]} rows"
            )
        if m.shape[0] == 0:
            raise ValidationError("gallery must contain at least one template")
        if not np.isfinite(m).all():
            raise ValidationError("gallery matrix contains non-finite values")
        if len(set(self.ids)) != len(self.ids):
            raise ValidationError("gallery ids must be unique")
        m64 = m.astype(np.float64)
        norms = np.linalg.norm(m64, axis=1)
        if np.max(np.abs(norms - 1.0)) > UNIT_NORM_TOL:
            raise ValidationError("gallery rows must be unit-norm within 1e-4")
        m = np.ascontiguousarray(m)
        if m.flags.writeable:
            m = m.copy()  # detach from the caller's buffer before freezing
            m.flags.writeable = False
        m64.flags.writeable = False
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "_matrix64", m64)
        object.__setattr__(
            self, "_index", {sid: i for i, sid in enumerate(self.ids)}
        )

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def row_of(self, subject_id: str) -> int:
        """Returns the row index of ``subject_id``.

        Raises:
            ValidationError: If the id is not enrolled.
        """
        try:
            return self._index[subject_id]
        except KeyError:
            raise ValidationError(f"unknown subject id {subject_id!r}") from None


@dataclass(frozen=True)
class SearchResult:
    """Ranked candidate list for one probe, best first."""

    entries: tuple[tuple[str, float], ...]

    def __post_init__(self):
        scores = [s for _, s in self.entries]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValidationError("search result scores must be non-increasing")

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(i for i, _ in self.entries)

    @property
    def scores(self) -> tuple[float, ...]:
        return tuple(s for _, s in self.entries)

    @property
    def best_id(self) -> str:
        return self.entries[0][0]


@dataclass(frozen=True)
class EvalReport:
    """Accuracy summary for verification and/or identification runs.

    Attributes:
        tar_at_far: ``(far_level, tar)`` pairs, one per requested level.
        thresholds: ``(far_level, score_threshold)`` pairs, parallel to
            ``tar_at_far``.
        cmc: ``cmc[r - 1]`` is the fraction of probes whose mate appears
            within rank ``r``.  Empty for pure verification runs.
        n_genuine: Number of genuine comparisons (or probes, for search).
        n_imposter: Number of imposter comparisons (0 for search runs).
    """

    tar_at_far: tuple[tuple[float, float], ...] = ()
    thresholds: tuple[tuple[float, float], ...] = ()
    cmc: tuple[float, ...] = ()
    n_genuine: int = 0
    n_imposter: int = 0

    def __post_init__(self):
        for level, tar in self.tar_at_far:
            if not (0.0 < level <= 1.0):
                raise ValidationError(f"FAR level {level} outside (0, 1]")
            if not (0.0 <= tar <= 1.0):
                raise ValidationError(f"TAR {tar} outside [0, 1]")
        for c in self.cmc:
            if not (0.0 <= c <= 1.0):
                raise ValidationError(f"CMC value {c} outside [0, 1]")
        if any(a > b for a, b in zip(self.cmc, self.cmc[1:])):
            raise ValidationError("CMC must be non-decreasing in rank")

    def to_json_dict(self) -> dict:
        """Returns a JSON-serializable summary."""
        return {
            "tar_at_far": [[f, t] for f, t in self.tar_at_far],
            "thresholds": [[f, t] for f, t in self.thresholds],
            "cmc": list(self.cmc),
            "n_genuine": self.n_genuine,
            "n_imposter": self.n_imposter,
        }


@dataclass(frozen=True)
class BenchmarkReport:
    """Wall-clock throughput summary for exhaustive gallery scans."""

    gallery_size: int
    dim: int
    n_probes: int
    repetitions: int
    threads: int
    matches_per_sec_single: float
    matches_per_sec_multi: float
    probe_latency_ms: float

    def to_json_dict(self) -> dict:
        return {
            "gallery_size": self.gallery_size,
            "dim": self.dim,
            "n_probes": self.n_probes,
            "repetitions": self.repetitions,
            "threads": self.threads,
            "matches_per_sec_single": self.matches_per_sec_single,
            "matches_per_sec_multi": self.matches_per_sec_multi,
            "probe_latency_ms": self.probe_latency_ms,
        }


# ---------------------------------------------------------------------------
# Gallery construction and search
# ---------------------------------------------------------------------------


def build_gallery(templates) -> Gallery:
    """Packs ``(id, FixedTemplate)`` pairs into an immutable gallery.

    Args:
        templates: Non-empty sequence of ``(subject_id, FixedTemplate)``;
            all templates must share one dimension and ids must be unique.

    Returns:
        A Gallery preserving insertion order.
    """
    items = list(templates)
    if not items:
        raise ValidationError("cannot build an empty gallery")
    ids = []
    rows = []
    dim = items[0][1].dim
    for sid, tpl in items:
        if not isinstance(sid, str) or not sid:
            raise ValidationError("subject ids must be non-empty strings")
        if tpl.dim != dim:
            raise ValidationError(
                f"template for {sid!r} has dim {tpl.dim}, expected {dim}"
            )
        ids.append(sid)
        rows.append(tpl.values)
    return Gallery(ids=tuple(ids), matrix=np.stack(rows).astype(np.float32))


def _scan_scores(gallery: Gallery, query, block_rows: int, workers: int = 1):
    """Scores a query against every gallery row.

    Accumulates each dot product in float64 and rounds to float32, so a
    scan is bit-identical to repeated pairwise scoring.  Rows are
    processed in blocks; with ``workers > 1`` the blocks are sharded
    across a thread pool into disjoint slices of one output array, so
    the merged result does not depend on the worker count.
    """
    m64 = gallery._matrix64
    q64 = np.asarray(query, dtype=np.float64)
    n = m64.shape[0]
    scores = np.empty(n, dtype=np.float32)
    starts = range(0, n, block_rows)

    def fill(start: int):
        stop = min(start + block_rows, n)
        scores[start:stop] = m64[start:stop] @ q64

    if workers > 1 and n > block_rows:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fill, starts))
    else:
        for start in starts:
            fill(start)
    return scores


def search(
    gallery: Gallery,
    query: FixedTemplate,
    k: int = 1,
    block_rows: int = DEFAULT_BLOCK_ROWS,
    workers: int = 1,
) -> SearchResult:
    """Exact top-k cosine search by exhaustive blocked scan.

    Args:
        gallery: The enrolled gallery.
        query: Probe template; its dimension must match the gallery.
        k: Number of candidates to return (capped at the gallery size).
        block_rows: Rows per scan block.
        workers: Shard the scan across this many threads (results are
            identical for any worker count).

    Returns:
        SearchResult of length ``min(k, N)``, ties broken by lower
        gallery index.
    """
    if query.dim != gallery.dim:
        raise ValidationError(
            f"query dim {query.dim} does not match gallery dim {gallery.dim}"
        )
    if k < 1:
        raise ValidationError("k must be >= 1")
    scores = _scan_scores(gallery, query.values, block_rows, workers)
    k = min(k, gallery.size)
    if k == 1:
        best = int(np.argmax(scores))
        order = [best]
    else:
        # stable sort on the negated scores keeps the lower gallery
        # index first among equal scores
        order = np.argsort(-scores, kind="stable")[:k]
    entries = tuple((gallery.ids[int(i)], float(scores[int(i)])) for i in order)
    return SearchResult(entries=entries)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_gallery(gallery: Gallery, path) -> None:
    """Writes a gallery as header + id table + packed float block."""
    parts = [
        GALLERY_MAGIC,
        struct.pack("<BHQ", GALLERY_VERSION, gallery.dim, gallery.size),
    ]
    for sid in gallery.ids:
        raw = sid.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValidationError(f"subject id too long to encode: {sid[:32]!r}...")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
    parts.append(np.ascontiguousarray(gallery.matrix, dtype="<f4").tobytes())
    atomic_write_bytes(Path(path), b"".join(parts))


def load_gallery(path, mmap: bool = True) -> Gallery:
    """Reads a gallery file, optionally memory-mapping the float block.

    Raises:
        FormatError: If the header, id table, or payload size is invalid.
    """
    path = Path(path)
    file_size = path.stat().st_size
    header_fmt = "<BHQ"
    header_len = 4 + struct.calcsize(header_fmt)
    with path.open("rb") as fh:
        head = fh.read(header_len)
        if len(head) < header_len:
            raise FormatError("gallery file shorter than its header")
        if head[:4] != GALLERY_MAGIC:
            raise FormatError(f"bad gallery magic {head[:4]!r}")
        version, dim, count = struct.unpack_from(header_fmt, head, 4)
        if version != GALLERY_VERSION:
            raise FormatError(f"unsupported gallery version {version}")
        if dim == 0 or count == 0:
            raise FormatError("gallery header declares an empty gallery")
        ids = []
        for _ in range(count):
            raw_len = fh.read(2)
            if len(raw_len) != 2:
                raise FormatError("gallery id table truncated")
            (id_len,) = struct.unpack("<H", raw_len)
            raw = fh.read(id_len)
            if len(raw) != id_len:
                raise FormatError("gallery id table truncated")
            try:
                ids.append(raw.decode("utf-8"))
            except UnicodeDecodeError as exc:
                raise FormatError(f"gallery id table is not valid UTF-8: {exc}") from None
        offset = fh.tell()
        expected = offset + count * dim * 4
        if file_size != expected:
            raise FormatError(
                f"gallery payload is {file_size - offset} bytes, "
                f"expected {expected - offset}"
            )
        if mmap:
            matrix = np.asarray(
                np.memmap(path, dtype="<f4", mode="r", offset=offset, shape=(count, dim))
            )
        else:
            matrix = np.frombuffer(fh.read(), dtype="<f4").reshape(count, dim)
    if matrix.dtype != np.float32:  # pragma: no cover - big-endian hosts only
        matrix = matrix.astype(np.float32)
    try:
        return Gallery(ids=tuple(ids), matrix=matrix)
    except ValidationError as exc:
        raise FormatError(f"gallery payload invalid: {exc}") from None


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------


def _limit_blas_threads(n: int):
    if threadpool_limits is None:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=n)


def benchmark(
    gallery: Gallery,
    queries,
    repetitions: int = 3,
    threads: int = 4,
) -> BenchmarkReport:
    """Measures exhaustive-scan throughput in template comparisons/sec.

    Runs the full single-probe search path (scan, round, top-1).  The
    single-thread figure pins the BLAS pool to one thread; the
    multi-thread figure runs independent probes concurrently, each scan
    itself single-threaded, which is how a high-traffic identification
    service would batch probes.

    Args:
        gallery: Gallery to scan (sizes below ~1000 rows give noisy,
            cache-resident figures).
        queries: Probe templates.
        repetitions: Full passes over the probe set per figure.
        threads: Worker count for the multi-threaded figure.

    Returns:
        BenchmarkReport with both throughput figures and the median
        single-thread per-probe latency in milliseconds.
    """
    queries = list(queries)
    if not queries:
        raise ValidationError("benchmark needs at least one probe")
    if repetitions < 1:
        raise ValidationError("repetitions must be >= 1")
    for q in queries:
        if q.dim != gallery.dim:
            raise ValidationError("probe dim does not match gallery dim")

    n_matches = gallery.size * len(queries) * repetitions

    search(gallery, queries[0], k=1)  # warm the float64 cache / code paths

    latencies = []
    with _limit_blas_threads(1):
        t0 = time.perf_counter()
        for _ in range(repetitions):
            for q in queries:
                p0 = time.perf_counter()
                search(gallery, q, k=1)
                latencies.append(time.perf_counter() - p0)
        single_elapsed = time.perf_counter() - t0

    with _limit_blas_threads(1):
        with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
            t0 = time.perf_counter()
            tasks = [
                pool.submit(search, gallery, q, 1)
                for _ in range(repetitions)
                for q in queries
            ]
            for t in tasks:
                t.result()
            multi_elapsed = time.perf_counter() - t0

    return BenchmarkReport(
        gallery_size=gallery.size,
        dim=gallery.dim,
        n_probes=len(queries),
        repetitions=repetitions,
        threads=threads,
        matches_per_sec_single=n_matches / single_elapsed,
        matches_per_sec_multi=n_matches / multi_elapsed,
        probe_latency_ms=float(np.median(latencies)) * 1e3,
    )


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def _as_scores(pairs, label: str) -> np.ndarray:
    """Normalizes a comparison list to a float score array.

    Each element may be a precomputed score or a ``(FixedTemplate,
    FixedTemplate)`` pair, which is scored here.
    """
    scores = []
    for item in pairs:
        if isinstance(item, (int, float, np.floating)):
            scores.append(float(item))
        elif (
            isinstance(item, tuple)
            and len(item) == 2
            and isinstance(item[0], FixedTemplate)
        ):
            scores.append(match_score(item[0], item[1]))
        else:
            raise ValidationError(
                f"{label} entries must be scores or template pairs, got {type(item).__name__}"
            )
    if not scores:
        raise ValidationError(f"need at least one {label} comparison")
    out = np.asarray(scores, dtype=np.float64)
    if not np.isfinite(out).all():
        raise ValidationError(f"{label} scores contain non-finite values")
    return out


def _threshold_for_far(imposter: np.ndarray, level: float) -> float:
    """Smallest observed-score threshold with empirical FAR <= level.

    Scans the unique imposter scores ascending and returns the first
    one accepting at most ``level * len(imposter)`` imposters under a
    >=-comparison.  If top-score ties make even the largest imposter
    score too permissive, the threshold steps just above it (FAR = 0).
    """
    n = imposter.size
    budget = level * n
    for theta in np.unique(imposter):  # unique sorts ascending
        if np.count_nonzero(imposter >= theta) <= budget:
            return float(theta)
    return float(np.nextafter(np.max(imposter), np.inf))


def eval_verification(
    genuine_pairs,
    imposter_pairs,
    far_levels=(0.1, 0.01),
) -> EvalReport:
    """Computes TAR at each requested FAR level from 1:1 comparisons.

    For each level ``f`` the threshold is the smallest score ``theta``
    with ``#(imposter >= theta) / n_imposter <= f``; TAR is the genuine
    fraction at or above that threshold.

    Args:
        genuine_pairs: Mated comparisons, as scores or template pairs.
        imposter_pairs: Non-mated comparisons, likewise.
        far_levels: Requested FAR operating points in (0, 1].

    Raises:
        UnsupportedFarLevelError: If a level is below ``1 / n_imposter``
            (no threshold can be measured at that resolution).
    """
    genuine = _as_scores(genuine_pairs, "genuine")
    imposter = _as_scores(imposter_pairs, "imposter")
    levels = [float(f) for f in far_levels]
    if not levels:
        raise ValidationError("need at least one FAR level")
    tar_at_far = []
    thresholds = []
    for level in levels:
        if not (0.0 < level <= 1.0):
            raise ValidationError(f"FAR level {level} outside (0, 1]")
        if level < 1.0 / imposter.size:
            raise UnsupportedFarLevelError(
                f"FAR level {level} needs more than {imposter.size} imposter "
                f"comparisons (minimum supported level is {1.0 / imposter.size})"
            )
        theta = _threshold_for_far(imposter, level)
        tar = float(np.count_nonzero(genuine >= theta)) / genuine.size
        tar_at_far.append((level, tar))
        thresholds.append((level, theta))
    return EvalReport(
        tar_at_far=tuple(tar_at_far),
        thresholds=tuple(thresholds),
        cmc=(),
        n_genuine=int(genuine.size),
        n_imposter=int(imposter.size),
    )


def eval_search(
    probes,
    gallery: Gallery,
    max_rank: int | None = None,
) -> EvalReport:
    """Computes the CMC curve for 1:N identification.

    Args:
        probes: Sequence of ``(true_id, FixedTemplate)``; each true id
            must be enrolled in the gallery.
        gallery: Gallery to search.
        max_rank: Highest rank reported (defaults to the gallery size).

    Returns:
        EvalReport whose ``cmc[r - 1]`` is the fraction of probes whose
        true id appears within rank ``r``.
    """
    probes = list(probes)
    if not probes:
        raise ValidationError("need at least one probe")
    n = gallery.size
    if max_rank is None:
        max_rank = n
    if not (1 <= max_rank <= n):
        raise ValidationError(f"max_rank must be in [1, {n}]")
    ranks = []
    for true_id, tpl in probes:
        row = gallery.row_of(true_id)
        if tpl.dim != gallery.dim:
            raise ValidationError("probe dim does not match gallery dim")
        scores = _scan_scores(gallery, tpl.values, DEFAULT_BLOCK_ROWS)
        s = scores[row]
        # rank under stable descending order with index tie-break
        ahead = np.count_nonzero(scores > s) + np.count_nonzero(scores[:row] == s)
        ranks.append(ahead + 1)
    ranks = np.asarray(ranks)
    cmc = tuple(
        float(np.count_nonzero(ranks <= r)) / len(ranks)
        for r in range(1, max_rank + 1)
    )
    return EvalReport(
        tar_at_far=(),
        thresholds=(),
        cmc=cmc,
        n_genuine=len(ranks),
        n_imposter=0,
    )
