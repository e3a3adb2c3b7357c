"""Two-stage training: symmetric contrastive pretraining, then frozen-backbone
supervised head training.  Batches mix slides; validation forward passes use
the same batch size as training so the attention context matches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import AdamW, Tensor
from .encoders import CoordNormalizer
from .errors import PearlError, TrainingDiverged


@dataclass
class TrainConfig:
    batch_size: int = 256
    max_epochs: int = 100
    patience: int = 15
    lr: float = 1e-4
    weight_decay: float = 1e-3
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.batch_size < 2:
            raise PearlError("batch_size must be >= 2 (contrastive needs negatives)")
        if not 0 < self.val_fraction < 1:
            raise PearlError("val_fraction must be in (0, 1)")
        if self.patience >= self.max_epochs:
            raise PearlError("patience must be < max_epochs")


@dataclass
class SpotDataset:
    """Aligned per-spot arrays for training."""

    spot_ids: list
    slide_ids: list
    scores: np.ndarray  # (N, P) pathway NES
    coords: np.ndarray  # (N, 2) raw coordinates
    features: np.ndarray  # (N, d_img)
    y_path: np.ndarray  # (N, P)
    y_gene: np.ndarray  # (N, g)

    def __post_init__(self):
        n = len(self.spot_ids)
        for name in ("scores", "coords", "features", "y_path", "y_gene"):
            arr = getattr(self, name)
            if arr.shape[0] != n:
                raise PearlError(f"{name} has {arr.shape[0]} rows, expected {n}")

    @property
    def n_spots(self):
        return len(self.spot_ids)

    def subset(self, idx):
        idx = np.asarray(idx)
        return SpotDataset(
            spot_ids=[self.spot_ids[i] for i in idx],
            slide_ids=[self.slide_ids[i] for i in idx],
            scores=self.scores[idx],
            coords=self.coords[idx],
            features=self.features[idx],
            y_path=self.y_path[idx],
            y_gene=self.y_gene[idx],
        )


def slide_stratified_split(slide_ids, val_fraction, seed):
    """(train_idx, val_idx): samples val_fraction of the spots of each slide."""
    rng = np.random.default_rng(seed)
    by_slide = {}
    for i, s in enumerate(slide_ids):
        by_slide.setdefault(s, []).append(i)
    train, val = [], []
    for s in sorted(by_slide):
        idx = np.array(by_slide[s])
        perm = rng.permutation(len(idx))
        n_val = max(1, int(round(val_fraction * len(idx)))) if len(idx) > 1 else 0
        val.extend(idx[perm[:n_val]])
        train.extend(idx[perm[n_val:]])
    return np.sort(np.array(train, dtype=int)), np.sort(np.array(val, dtype=int))


def contrastive_loss(h_image, h_path, inv_tau):
    """Symmetric InfoNCE with identity targets.

    Both embeddings are L2-normalized; similarity logits are scaled by the
    inverse temperature (a Tensor keeps tau trainable, a float freezes it).
    """
    if h_image.shape != h_path.shape:
        raise PearlError(f"embedding shape mismatch: {h_image.shape} vs {h_path.shape}")
    if h_image.shape[0] < 2:
        raise PearlError("contrastive loss needs at least 2 pairs")
    hi = ad.l2_normalize_rows(h_image)
    hp = ad.l2_normalize_rows(h_path)
    sim = ad.matmul(hi, ad.transpose(hp))
    if isinstance(inv_tau, Tensor):
        s = ad.mul(sim, inv_tau)
    else:
        s = ad.mul_scalar(sim, float(inv_tau))
    row = ad.cross_entropy_index(s)
    col = ad.cross_entropy_index(ad.transpose(s))
    return ad.mul_scalar(ad.add(row, col), 0.5)


def _batches(n, batch_size, rng=None):
    idx = np.arange(n) if rng is None else rng.permutation(n)
    out = []
    for start in range(0, n, batch_size):
        b = idx[start : start + batch_size]
        if len(b) >= 2:
            out.append(b)
    return out


def _stage1_batch_loss(model, ds, idx, normalizer):
    hp = model.encode_pathways(ds.scores[idx], normalizer.transform(ds.coords[idx]))
    hi = model.encode_images(ds.features[idx])
    return contrastive_loss(hi, hp, model.inv_tau())


def train_stage1(dataset, model, config):
    """Contrastive pretraining of the backbone.

    Returns (model, history) where history holds per-epoch train/val loss;
    the model carries the best-validation parameters.
    """
    train_idx, val_idx = slide_stratified_split(
        dataset.slide_ids, config.val_fraction, config.seed
    )
    train = dataset.subset(train_idx)
    val = dataset.subset(val_idx)
    normalizer = CoordNormalizer.fit(train.coords)
    params = model.stage1_parameters()
    opt = AdamW([p for _, p in params], lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    history = {"train_loss": [], "val_loss": []}
    best_loss, best_snap, bad_epochs = math.inf, model.snapshot(), 0
    for epoch in range(config.max_epochs):
        losses = []
        for bi, idx in enumerate(_batches(train.n_spots, config.batch_size, rng)):
            opt.zero_grad()
            loss = _stage1_batch_loss(model, train, idx, normalizer)
            lv = loss.item()
            if not math.isfinite(lv):
                raise TrainingDiverged(epoch, bi)
            ad.backward(loss)
            opt.step()
            model.clamp_tau()
            losses.append(lv)
        val_losses = [
            _stage1_batch_loss(model, val, idx, normalizer).item()
            for idx in _batches(val.n_spots, config.batch_size)
        ]
        history["train_loss"].append(float(np.mean(losses)))
        history["val_loss"].append(float(np.mean(val_losses)))
        if history["val_loss"][-1] < best_loss:
            best_loss = history["val_loss"][-1]
            best_snap = model.snapshot()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                break
    model.restore(best_snap)
    return model, history, normalizer


def supervised_loss(model, h_image, y_path, y_gene):
    yp, yg = model.predict_heads(h_image)
    return ad.add(
        ad.mse(yp, Tensor(np.asarray(y_path, dtype=model.dtype))),
        ad.mse(yg, Tensor(np.asarray(y_gene, dtype=model.dtype))),
    )


def train_stage2(dataset, model, config):
    """Head training on frozen image embeddings.

    Only the two prediction heads receive gradients; the backbone embedding
    of every spot is computed once up front.
    """
    train_idx, val_idx = slide_stratified_split(
        dataset.slide_ids, config.val_fraction, config.seed
    )
    h_all = embed_images(model, dataset.features, config.batch_size)
    params = model.stage2_parameters()
    opt = AdamW([p for _, p in params], lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed + 1)
    history = {"train_loss": [], "val_loss": []}
    best_loss, best_snap, bad_epochs = math.inf, model.snapshot(), 0
    for epoch in range(config.max_epochs):
        losses = []
        for bi, pos in enumerate(_batches(len(train_idx), config.batch_size, rng)):
            idx = train_idx[pos]
            opt.zero_grad()
            loss = supervised_loss(model, h_all[idx], dataset.y_path[idx], dataset.y_gene[idx])
            lv = loss.item()
            if not math.isfinite(lv):
                raise TrainingDiverged(epoch, bi)
            ad.backward(loss)
            opt.step()
            losses.append(lv)
        val_loss = supervised_loss(
            model, h_all[val_idx], dataset.y_path[val_idx], dataset.y_gene[val_idx]
        ).item()
        history["train_loss"].append(float(np.mean(losses)))
        history["val_loss"].append(float(val_loss))
        if val_loss < best_loss:
            best_loss = val_loss
            best_snap = model.snapshot()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                break
    model.restore(best_snap)
    return model, history


def embed_images(model, features, batch_size=256):
    """Frozen forward of the image branch over all rows."""
    out = []
    for start in range(0, features.shape[0], batch_size):
        out.append(model.encode_images(features[start : start + batch_size]).values)
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.config.embed_dim))


def retrieval_top1(model, dataset, normalizer, batch_size=256, seed=0):
    """Fraction of spots whose image embedding is closest to its own pathway
    embedding within its batch (diagonal argmax of the similarity matrix)."""
    rng = np.random.default_rng(seed)
    hits, total = 0, 0
    for idx in _batches(dataset.n_spots, batch_size, rng):
        hp = model.encode_pathways(
            dataset.scores[idx], normalizer.transform(dataset.coords[idx])
        ).values
        hi = model.encode_images(dataset.features[idx]).values
        hp = hp / np.linalg.norm(hp, axis=1, keepdims=True)
        hi = hi / np.linalg.norm(hi, axis=1, keepdims=True)
        sim = hi @ hp.T
        hits += int((sim.argmax(axis=1) == np.arange(len(idx))).sum())
        total += len(idx)
    return hits / total if total else 0.0
