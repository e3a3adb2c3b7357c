"""Seeded synthetic data for desk-scale verification.

Spots sit on rectangular grids (one per slide); latent pathway activities are
low-frequency cosine mixtures over the grid, pathway member genes are
Poisson-upregulated with activity, and patch features are a fixed random
linear map of the activities mixed with noise by the coupling parameter.
"""

from __future__ import annotations

import math

import numpy as np
import scipy.sparse as sp

from .data_io import (
    RAW_COUNTS,
    ExpressionMatrix,
    GeneSet,
    GeneSetCollection,
    PatchFeatureMatrix,
    SpotGeometry,
    SurvivalRecord,
    SurvivalTable,
)
from .errors import PearlError


def _grid_layout(n_spots, n_slides):
    """Split spots over slides as near-square grids; returns per-slide (rows, cols)."""
    per = [n_spots // n_slides + (1 if i < n_spots % n_slides else 0) for i in range(n_slides)]
    layouts = []
    for n in per:
        rows = max(1, int(math.sqrt(n)))
        cols = (n + rows - 1) // rows
        layouts.append((n, rows, cols))
    return layouts


def gen_st_dataset(
    seed,
    n_spots,
    n_genes,
    n_pathways,
    noise_sigma=0.05,
    coupling=0.95,
    n_slides=2,
    d_img=64,
    genes_per_pathway=None,
    activity_strength=1.2,
    activity_noise=0.25,
):
    """Returns (ExpressionMatrix, [SpotGeometry], GeneSetCollection,
    PatchFeatureMatrix, latent activities)."""
    if not 0.0 <= coupling <= 1.0:
        raise PearlError("coupling must be in [0, 1]")
    if genes_per_pathway is None:
        genes_per_pathway = max(3, (n_genes * 3 // 5) // n_pathways)
    if n_pathways * genes_per_pathway > n_genes:
        raise PearlError(
            f"{n_pathways} pathways x {genes_per_pathway} genes exceed {n_genes} genes"
        )
    rng = np.random.default_rng(seed)

    # geometry: near-square grid per slide, raw coords = 100 * grid indices
    geoms = []
    for si, (n, rows, cols) in enumerate(_grid_layout(n_spots, n_slides)):
        slide = f"slide{si}"
        for k in range(n):
            r, c = divmod(k, cols)
            geoms.append(
                SpotGeometry(
                    spot_id=f"{slide}_r{r}_c{c}",
                    slide_id=slide,
                    x=100.0 * c,
                    y=100.0 * r,
                    array_row=r,
                    array_col=c,
                )
            )
    spot_ids = [g.spot_id for g in geoms]

    # latent activities: per-pathway cosine mixtures over unit-square coords,
    # plus a small white component so neighboring spots stay distinguishable
    layouts = _grid_layout(n_spots, n_slides)
    uv = np.zeros((n_spots, 2))
    for i, g in enumerate(geoms):
        _, rows, cols = layouts[int(g.slide_id[5:])]
        uv[i] = (g.array_col / max(cols - 1, 1), g.array_row / max(rows - 1, 1))
    activities = np.zeros((n_spots, n_pathways))
    for k in range(n_pathways):
        field_val = np.zeros(n_spots)
        for _ in range(3):
            freq = rng.uniform(0.5, 3.0, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.normal(0, 1)
            field_val += amp * np.cos(2 * np.pi * (uv @ freq) + phase)
        field_val += activity_noise * rng.normal(size=n_spots)
        activities[:, k] = field_val
    activities = (activities - activities.mean(axis=0)) / activities.std(axis=0)

    gene_ids = [f"G{j:05d}" for j in range(n_genes)]
    sets = []
    gene_pathway = np.full(n_genes, -1)
    for k in range(n_pathways):
        members = range(k * genes_per_pathway, (k + 1) * genes_per_pathway)
        gene_pathway[list(members)] = k
        sets.append(
            GeneSet(
                name=f"PW{k:03d}",
                description=f"synthetic pathway {k}",
                genes=frozenset(gene_ids[j] for j in members),
            )
        )
    collection = GeneSetCollection(sets=sets)

    base_log = rng.uniform(np.log(2.0), np.log(20.0), size=n_genes)
    log_rate = np.tile(base_log, (n_spots, 1))
    member = gene_pathway >= 0
    log_rate[:, member] += activity_strength * activities[:, gene_pathway[member]]
    if noise_sigma > 0:
        log_rate += noise_sigma * rng.normal(size=log_rate.shape)
    counts = rng.poisson(np.exp(log_rate)).astype(np.float64)
    expr = ExpressionMatrix(
        spot_ids=spot_ids,
        gene_ids=gene_ids,
        matrix=sp.csr_matrix(counts),
        value_kind=RAW_COUNTS,
    )

    w_map = rng.normal(size=(n_pathways, d_img)) / math.sqrt(n_pathways)
    eps = rng.normal(size=(n_spots, d_img))
    features = coupling * (activities @ w_map) + ((1.0 - coupling) + noise_sigma) * eps
    patch = PatchFeatureMatrix(spot_ids=spot_ids, features=features)
    return expr, geoms, collection, patch, activities


def gen_survival_cohort(
    seed, n_subjects, censor_rate=0.3, spots_per_slide=16, embed_dim=256, risk_strength=1.5
):
    """Returns (SurvivalTable, {slide_id: (M, embed_dim) embeddings}, planted risks).

    Survival times are exponential with rate exp(risk); censoring is an
    independent uniform fraction of the event time.
    """
    if not 0.0 <= censor_rate <= 1.0:
        raise PearlError("censor_rate must be in [0, 1]")
    rng = np.random.default_rng(seed)
    direction = rng.normal(size=embed_dim)
    direction /= np.linalg.norm(direction)
    rows, embeddings, risks = [], {}, np.zeros(n_subjects)
    for i in range(n_subjects):
        latent = rng.normal(size=embed_dim)
        risk = risk_strength * float(direction @ latent)
        risks[i] = risk
        slide = f"subj{i:04d}_slide0"
        embeddings[slide] = latent + 0.1 * rng.normal(size=(spots_per_slide, embed_dim))
        event_time = rng.exponential(1.0 / np.exp(risk))
        if rng.uniform() < censor_rate:
            t = event_time * rng.uniform(0.05, 1.0)
            event = False
        else:
            t, event = event_time, True
        rows.append(
            SurvivalRecord(
                subject_id=f"subj{i:04d}",
                time=max(t, 1e-9),
                event=event,
                slide_ids=(slide,),
            )
        )
    return SurvivalTable(rows), embeddings, risks
