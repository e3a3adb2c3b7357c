"""Parsers and writers for every on-disk format.

Formats:
  - GMT gene sets (name TAB description TAB gene...)
  - expression matrices, dense TSV or sparse triplet TSV
  - spot coordinates CSV
  - patch feature TSV
  - survival CSV
  - pathway score TSV
  - checkpoints: <name>.manifest.json + <name>.params.bin (little-endian f32)

Parsed structures are immutable by convention and safe to share read-only.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import (
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    DataFormatError,
)

CHECKPOINT_FORMAT_VERSION = 1

RAW_COUNTS = "raw_counts"
NORMALIZED_LOG = "normalized_log"

COORDS_HEADER = "spot_id,slide_id,x,y,array_row,array_col"
SURVIVAL_HEADER = "subject_id,time,event,slide_ids"


@dataclass
class ExpressionMatrix:
    """Sparse spots x genes matrix with identifier lists."""

    spot_ids: list
    gene_ids: list
    matrix: sp.csr_matrix
    value_kind: str = RAW_COUNTS

    def __post_init__(self):
        if len(set(self.spot_ids)) != len(self.spot_ids):
            raise DataFormatError("duplicate spot ids")
        if len(set(self.gene_ids)) != len(self.gene_ids):
            raise DataFormatError("duplicate gene ids")
        if self.matrix.shape != (len(self.spot_ids), len(self.gene_ids)):
            raise DataFormatError(
                f"matrix shape {self.matrix.shape} does not match id lists "
                f"({len(self.spot_ids)} spots, {len(self.gene_ids)} genes)"
            )
        if self.value_kind == RAW_COUNTS and self.matrix.nnz and self.matrix.data.min() < 0:
            raise DataFormatError("raw counts must be non-negative")

    @property
    def n_spots(self):
        return len(self.spot_ids)

    @property
    def n_genes(self):
        return len(self.gene_ids)

    def dense(self):
        return np.asarray(self.matrix.todense(), dtype=np.float64)


@dataclass(frozen=True)
class SpotGeometry:
    spot_id: str
    slide_id: str
    x: float
    y: float
    array_row: int
    array_col: int


@dataclass(frozen=True)
class GeneSet:
    name: str
    description: str
    genes: frozenset


@dataclass
class GeneSetCollection:
    sets: list
    dedup_warnings: int = 0

    def __post_init__(self):
        names = [s.name for s in self.sets]
        if len(set(names)) != len(names):
            raise DataFormatError("duplicate gene set names")
        for s in self.sets:
            if not s.genes:
                raise DataFormatError(f"gene set {s.name!r} is empty")

    def names(self):
        return [s.name for s in self.sets]

    def __len__(self):
        return len(self.sets)


@dataclass
class PatchFeatureMatrix:
    spot_ids: list
    features: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] != len(self.spot_ids):
            raise DataFormatError("feature row count does not match spot count")
        if not np.all(np.isfinite(self.features)):
            raise DataFormatError("non-finite feature value")

    @property
    def d_img(self):
        return self.features.shape[1]


@dataclass(frozen=True)
class SurvivalRecord:
    subject_id: str
    time: float
    event: bool
    slide_ids: tuple


@dataclass
class SurvivalTable:
    rows: list

    def __post_init__(self):
        for r in self.rows:
            if r.time <= 0:
                raise DataFormatError(f"subject {r.subject_id!r}: time must be > 0")


@dataclass
class PathwayScoreMatrix:
    spot_ids: list
    pathway_names: list
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (len(self.spot_ids), len(self.pathway_names)):
            raise DataFormatError("score matrix shape does not match id lists")
        if not np.all(np.isfinite(self.scores)):
            raise DataFormatError("non-finite pathway score")


# ---------------------------------------------------------------------------
# GMT
# ---------------------------------------------------------------------------


def parse_gmt(text):
    """Parse GMT text: one gene set per non-empty line.

    Duplicate gene symbols within a line are removed; the total number of
    removed duplicates is reported on the collection.
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    sets = []
    seen_names = set()
    dedup = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.rstrip("\n").split("\t")
        if len(fields) < 3:
            raise DataFormatError(
                f"expected at least 3 tab-separated fields, got {len(fields)}",
                line=lineno,
            )
        name = fields[0].strip()
        if name in seen_names:
            raise DataFormatError(f"duplicate gene set name {name!r}", line=lineno)
        seen_names.add(name)
        genes = []
        seen_genes = set()
        for raw in fields[2:]:
            g = raw.strip()
            if not g:
                continue
            if g in seen_genes:
                dedup += 1
                continue
            seen_genes.add(g)
            genes.append(g)
        sets.append(GeneSet(name=name, description=fields[1], genes=frozenset(genes)))
    return GeneSetCollection(sets=sets, dedup_warnings=dedup)


def write_gmt(collection, path):
    with open(path, "w", encoding="utf-8") as fh:
        for s in collection.sets:
            fh.write("\t".join([s.name, s.description] + sorted(s.genes)) + "\n")


def read_gmt(path):
    with open(path, "rb") as fh:
        return parse_gmt(fh.read())


# ---------------------------------------------------------------------------
# Expression matrices
# ---------------------------------------------------------------------------


def parse_expression(path, fmt="sparse_triplet_tsv", value_kind=RAW_COUNTS):
    """Parse a dense or sparse-triplet expression TSV.

    `value_kind` tags the result; files written mid-pipeline (after
    normalization) are re-read with value_kind=normalized_log.
    """
    if fmt == "dense_tsv":
        m = _parse_dense(path)
    elif fmt == "sparse_triplet_tsv":
        m = _parse_triplets(path)
    else:
        raise DataFormatError(f"unknown expression format {fmt!r}")
    m.value_kind = value_kind
    return m


def _parse_dense(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines:
        return ExpressionMatrix([], [], sp.csr_matrix((0, 0)), RAW_COUNTS)
    header = lines[0].split("\t")
    gene_ids = header[1:] if header and header[0] == "spot" else header
    spot_ids, rows, cols, vals = [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        if len(fields) != len(gene_ids) + 1:
            raise DataFormatError(
                f"expected {len(gene_ids) + 1} fields, got {len(fields)}", line=lineno
            )
        spot_ids.append(fields[0].strip())
        for j, cell in enumerate(fields[1:]):
            v = _parse_value(cell, lineno)
            if v != 0.0:
                rows.append(len(spot_ids) - 1)
                cols.append(j)
                vals.append(v)
    mat = sp.csr_matrix(
        (vals, (rows, cols)), shape=(len(spot_ids), len(gene_ids)), dtype=np.float64
    )
    return ExpressionMatrix(spot_ids, [g.strip() for g in gene_ids], mat, RAW_COUNTS)


def _parse_triplets(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines:
        return ExpressionMatrix([], [], sp.csr_matrix((0, 0)), RAW_COUNTS)
    if lines[0].split("\t") != ["spot", "gene", "value"]:
        raise DataFormatError("expected header 'spot\\tgene\\tvalue'", line=1)
    spot_index, gene_index = {}, {}
    spot_ids, gene_ids = [], []
    rows, cols, vals = [], [], []
    seen_pairs = set()
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        if len(fields) != 3:
            raise DataFormatError(f"expected 3 fields, got {len(fields)}", line=lineno)
        spot, gene = fields[0].strip(), fields[1].strip()
        v = _parse_value(fields[2], lineno)
        si = spot_index.setdefault(spot, len(spot_ids))
        if si == len(spot_ids):
            spot_ids.append(spot)
        gi = gene_index.setdefault(gene, len(gene_ids))
        if gi == len(gene_ids):
            gene_ids.append(gene)
        if (si, gi) in seen_pairs:
            raise DataFormatError(f"duplicate entry for ({spot}, {gene})", line=lineno)
        seen_pairs.add((si, gi))
        if v != 0.0:
            rows.append(si)
            cols.append(gi)
            vals.append(v)
    mat = sp.csr_matrix(
        (vals, (rows, cols)), shape=(len(spot_ids), len(gene_ids)), dtype=np.float64
    )
    return ExpressionMatrix(spot_ids, gene_ids, mat, RAW_COUNTS)


def _parse_value(cell, lineno):
    try:
        v = float(cell)
    except ValueError:
        raise DataFormatError(f"bad numeric value {cell!r}", line=lineno) from None
    if not np.isfinite(v):
        raise DataFormatError(f"non-finite value {cell!r}", line=lineno)
    if v < 0:
        raise DataFormatError(f"negative value {cell!r}", line=lineno)
    return v


def write_expression(m, path, fmt="sparse_triplet_tsv"):
    if fmt == "dense_tsv":
        dense = m.dense()
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("spot\t" + "\t".join(m.gene_ids) + "\n")
            for i, sid in enumerate(m.spot_ids):
                fh.write(sid + "\t" + "\t".join(_fmt(v) for v in dense[i]) + "\n")
    elif fmt == "sparse_triplet_tsv":
        coo = m.matrix.tocoo()
        # canonical order: by row, then gene id, so serialization does not
        # depend on internal column numbering
        gene_rank = np.argsort(np.argsort(m.gene_ids, kind="stable"), kind="stable")
        order = np.lexsort((gene_rank[coo.col], coo.row))
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("spot\tgene\tvalue\n")
            for k in order:
                fh.write(
                    f"{m.spot_ids[coo.row[k]]}\t{m.gene_ids[coo.col[k]]}\t{_fmt(coo.data[k])}\n"
                )
    else:
        raise DataFormatError(f"unknown expression format {fmt!r}")


def _fmt(v):
    # repr round-trips float64 exactly; integers print compactly
    f = float(v)
    return str(int(f)) if f == int(f) and abs(f) < 1e15 else repr(f)


# ---------------------------------------------------------------------------
# Coordinates, features, survival, scores
# ---------------------------------------------------------------------------


def read_coords(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0] != COORDS_HEADER:
        raise DataFormatError(f"expected header {COORDS_HEADER!r}", line=1)
    geoms = []
    seen_pos = set()
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if len(fields) != 6:
            raise DataFormatError(f"expected 6 fields, got {len(fields)}", line=lineno)
        try:
            g = SpotGeometry(
                spot_id=fields[0],
                slide_id=fields[1],
                x=float(fields[2]),
                y=float(fields[3]),
                array_row=int(fields[4]),
                array_col=int(fields[5]),
            )
        except ValueError as exc:
            raise DataFormatError(str(exc), line=lineno) from None
        key = (g.slide_id, g.array_row, g.array_col)
        if key in seen_pos:
            raise DataFormatError(f"duplicate grid position {key}", line=lineno)
        seen_pos.add(key)
        geoms.append(g)
    return geoms


def write_coords(geoms, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(COORDS_HEADER + "\n")
        for g in geoms:
            fh.write(
                f"{g.spot_id},{g.slide_id},{_fmt(g.x)},{_fmt(g.y)},{g.array_row},{g.array_col}\n"
            )


def read_features(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines:
        raise DataFormatError("empty feature file")
    header = lines[0].split("\t")
    if header[0] != "spot_id":
        raise DataFormatError("expected first header column 'spot_id'", line=1)
    d = len(header) - 1
    spot_ids, rows = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        if len(fields) != d + 1:
            raise DataFormatError(f"expected {d + 1} fields, got {len(fields)}", line=lineno)
        spot_ids.append(fields[0])
        try:
            rows.append([float(v) for v in fields[1:]])
        except ValueError as exc:
            raise DataFormatError(str(exc), line=lineno) from None
    return PatchFeatureMatrix(spot_ids, np.asarray(rows, dtype=np.float64))


def write_features(fm, path, prefix="f"):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("spot_id\t" + "\t".join(f"{prefix}{j}" for j in range(fm.d_img)) + "\n")
        for sid, row in zip(fm.spot_ids, fm.features):
            fh.write(sid + "\t" + "\t".join(repr(float(v)) for v in row) + "\n")


def read_survival(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0] != SURVIVAL_HEADER:
        raise DataFormatError(f"expected header {SURVIVAL_HEADER!r}", line=1)
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if len(fields) != 4:
            raise DataFormatError(f"expected 4 fields, got {len(fields)}", line=lineno)
        ev = fields[2].strip().lower()
        if ev not in {"0", "1", "true", "false"}:
            raise DataFormatError(f"bad event flag {fields[2]!r}", line=lineno)
        try:
            t = float(fields[1])
        except ValueError:
            raise DataFormatError(f"bad time {fields[1]!r}", line=lineno) from None
        rows.append(
            SurvivalRecord(
                subject_id=fields[0],
                time=t,
                event=ev in {"1", "true"},
                slide_ids=tuple(s for s in fields[3].split(";") if s),
            )
        )
    return SurvivalTable(rows)


def write_survival(table, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(SURVIVAL_HEADER + "\n")
        for r in table.rows:
            fh.write(
                f"{r.subject_id},{repr(r.time)},{int(r.event)},{';'.join(r.slide_ids)}\n"
            )


def read_scores(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines:
        raise DataFormatError("empty score file")
    header = lines[0].split("\t")
    if header[0] != "spot":
        raise DataFormatError("expected first header column 'spot'", line=1)
    names = header[1:]
    spot_ids, rows = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        if len(fields) != len(names) + 1:
            raise DataFormatError(
                f"expected {len(names) + 1} fields, got {len(fields)}", line=lineno
            )
        spot_ids.append(fields[0])
        rows.append([float(v) for v in fields[1:]])
    return PathwayScoreMatrix(spot_ids, names, np.asarray(rows, dtype=np.float64))


def write_scores(sm, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("spot\t" + "\t".join(sm.pathway_names) + "\n")
        for sid, row in zip(sm.spot_ids, sm.scores):
            fh.write(sid + "\t" + "\t".join(repr(float(v)) for v in row) + "\n")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params, hyperparams, path, extra=None):
    """Write <path>.manifest.json and <path>.params.bin.

    `params` is an ordered list of (name, float32 ndarray); the blob stores
    them back to back as little-endian f32 in manifest order.
    """
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "hyperparams": hyperparams,
        "params": [{"name": n, "shape": list(a.shape)} for n, a in params],
    }
    if extra:
        manifest["extra"] = extra
    with open(path + ".manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    blob = b"".join(
        np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in params
    )
    with open(path + ".params.bin", "wb") as fh:
        fh.write(blob)


def load_checkpoint(path):
    """Return (params, hyperparams, extra); params is [(name, f32 ndarray)]."""
    manifest_path = path + ".manifest.json"
    if not os.path.exists(manifest_path):
        raise DataFormatError(f"missing manifest {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointVersionError(
            f"format version {manifest.get('format_version')} != {CHECKPOINT_FORMAT_VERSION}"
        )
    with open(path + ".params.bin", "rb") as fh:
        blob = fh.read()
    expected = sum(int(np.prod(p["shape"])) for p in manifest["params"]) * 4
    if len(blob) < expected:
        raise CheckpointTruncatedError(
            f"blob holds {len(blob)} bytes, manifest declares {expected}"
        )
    if len(blob) > expected:
        raise CheckpointShapeError(
            f"blob holds {len(blob)} bytes, manifest declares {expected}"
        )
    params = []
    offset = 0
    for p in manifest["params"]:
        n = int(np.prod(p["shape"]))
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(p["shape"])
        params.append((p["name"], arr.copy()))
        offset += n * 4
    return params, manifest["hyperparams"], manifest.get("extra")
