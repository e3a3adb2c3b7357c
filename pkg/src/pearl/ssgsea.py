"""Per-spot pathway activity via weighted running-sum enrichment.

The enrichment score is the running-sum integral (sum of P_in - P_out over
all rank positions), and NES divides by the mean absolute score of
size-matched random gene sets.  All gene bookkeeping runs in canonical
(lexicographic gene id) order so results are invariant to the column order
of the input matrix, and null draws use a counter-based (Philox) generator
keyed by (seed, set size) so equal-size pathways share null sets.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data_io import NORMALIZED_LOG, PathwayScoreMatrix
from .errors import DegeneratePathway, MissingPathwayGenes, PearlError


@dataclass
class SsgseaConfig:
    weight_exponent: float = 0.75
    null_sets: int = 100
    rng_seed: int = 0
    epsilon: float = 1e-12

    def __post_init__(self):
        if self.null_sets < 1:
            raise PearlError("null_sets must be >= 1")
        if not np.isfinite(self.weight_exponent) or self.weight_exponent < 0:
            raise PearlError("weight_exponent must be finite and >= 0")


def rank_genes(values, gene_ids=None):
    """Sort genes by expression descending; ties by ascending canonical id.

    Returns (order, weights): `order` holds input indices in rank order and
    weights[j] = n_genes - j for 0-based position j.
    """
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[0]
    if gene_ids is None:
        tie_key = np.arange(n)
    else:
        tie_key = np.empty(n, dtype=np.int64)
        tie_key[np.argsort(gene_ids, kind="stable")] = np.arange(n)
    order = np.lexsort((tie_key, -values))
    weights = np.arange(n, 0, -1, dtype=np.float64)
    return order, weights


def _running_sum_es(hit_mask, weights, alpha):
    """ES for hit indicator(s) given rank-ordered weights.

    hit_mask: (..., n) boolean in rank order.  Uses float64 throughout.
    """
    n = weights.shape[0]
    w_alpha = weights**alpha
    hit = hit_mask.astype(np.float64)
    n_hit = hit.sum(axis=-1, keepdims=True)
    n_miss = n - n_hit
    denom_in = (hit * w_alpha).sum(axis=-1, keepdims=True)
    p_in = np.cumsum(hit * w_alpha, axis=-1) / denom_in
    p_out = np.cumsum(1.0 - hit, axis=-1) / n_miss
    return (p_in - p_out).sum(axis=-1)


def enrichment_score(order, weights, member_mask, alpha, pathway="<set>"):
    """ES of one gene set for one spot.

    `member_mask` is boolean over input gene indices; `order`/`weights` come
    from rank_genes.
    """
    member_mask = np.asarray(member_mask, dtype=bool)
    m = int(member_mask.sum())
    n = weights.shape[0]
    if m == 0:
        raise MissingPathwayGenes(pathway)
    if m == n:
        raise DegeneratePathway(pathway)
    return float(_running_sum_es(member_mask[order], weights, alpha))


def _null_masks(seed, set_size, n_genes, n_null):
    """Boolean (n_null, n_genes) membership over canonical gene indices."""
    key = (int(seed) << 32) ^ (set_size & 0xFFFFFFFF)
    rng = np.random.Generator(np.random.Philox(key=key))
    masks = np.zeros((n_null, n_genes), dtype=bool)
    for i in range(n_null):
        masks[i, rng.choice(n_genes, size=set_size, replace=False)] = True
    return masks


def nes(values, gene_ids, member_genes, config):
    """Normalized enrichment score of one gene set in one spot.

    `values` is the expression vector over `gene_ids` (canonical order not
    required); `member_genes` is an iterable of gene symbols.
    """
    gene_ids = list(gene_ids)
    canon = sorted(range(len(gene_ids)), key=lambda j: gene_ids[j])
    values = np.asarray(values, dtype=np.float64)[canon]
    ids = [gene_ids[j] for j in canon]
    members = set(member_genes)
    member_mask = np.array([g in members for g in ids], dtype=bool)
    order, weights = rank_genes(values)
    es = enrichment_score(order, weights, member_mask, config.weight_exponent)
    m = int(member_mask.sum())
    null = _null_masks(config.rng_seed, m, len(ids), config.null_sets)
    null_es = _running_sum_es(null[:, order], weights, config.weight_exponent)
    denom = max(float(np.abs(null_es).mean()), config.epsilon)
    return es / denom


def score_matrix(m, sets, config, threads=1):
    """NES for every (spot, pathway); returns (PathwayScoreMatrix, dropped).

    Pathways with no measured genes are dropped and reported; a pathway
    covering every measured gene raises DegeneratePathway.  Scoring expects
    the full post-normalization matrix (before HVG subsetting).
    """
    if m.value_kind != NORMALIZED_LOG:
        raise PearlError(f"expected normalized_log input, got {m.value_kind!r}")
    canon = sorted(range(m.n_genes), key=lambda j: m.gene_ids[j])
    ids = [m.gene_ids[j] for j in canon]
    id_index = {g: i for i, g in enumerate(ids)}
    dense = m.dense()[:, canon]
    n_genes = len(ids)

    kept, dropped, member_masks = [], [], []
    for s in sets.sets:
        idx = [id_index[g] for g in s.genes if g in id_index]
        if not idx:
            dropped.append(s.name)
            continue
        if len(idx) == n_genes:
            raise DegeneratePathway(s.name)
        mask = np.zeros(n_genes, dtype=bool)
        mask[idx] = True
        kept.append(s.name)
        member_masks.append(mask)
    if not kept:
        raise PearlError("no pathway overlaps the measured genes")
    member_mat = np.stack(member_masks)  # (P, n_genes)
    sizes = member_mat.sum(axis=1)
    distinct_sizes = sorted(set(int(k) for k in sizes))
    null_by_size = {
        k: _null_masks(config.rng_seed, k, n_genes, config.null_sets)
        for k in distinct_sizes
    }
    alpha = config.weight_exponent
    weights = np.arange(n_genes, 0, -1, dtype=np.float64)

    def score_spot(si):
        order = np.lexsort((np.arange(n_genes), -dense[si]))
        es = _running_sum_es(member_mat[:, order], weights, alpha)
        row = np.empty(len(kept))
        denom_by_size = {}
        for k in distinct_sizes:
            null_es = _running_sum_es(null_by_size[k][:, order], weights, alpha)
            denom_by_size[k] = max(float(np.abs(null_es).mean()), config.epsilon)
        for pi in range(len(kept)):
            row[pi] = es[pi] / denom_by_size[int(sizes[pi])]
        return row

    scores = np.empty((m.n_spots, len(kept)))
    if threads <= 1:
        for si in range(m.n_spots):
            scores[si] = score_spot(si)
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            for si, row in enumerate(ex.map(score_spot, range(m.n_spots))):
                scores[si] = row
    return PathwayScoreMatrix(list(m.spot_ids), kept, scores), dropped
