"""Command-line orchestration of the pipeline.

Every subcommand reads declared inputs, writes declared outputs under
--out-dir, and exits 0 on success; failures print a machine-readable JSON
object to stderr and exit nonzero.  Hyperparameters come from a single JSON
config file; paths come from flags (run-cv also accepts a "paths" section).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import data_io, preprocess, ssgsea, synthgen, survival, trainer
from .encoders import CoordNormalizer, ModelConfig, PearlModel, load_model, save_model
from .errors import ConfigError, PearlError
from .metrics import evaluate_expression
from .preprocess import PreprocessConfig
from .ssgsea import SsgseaConfig
from .trainer import SpotDataset, TrainConfig

_CONFIG_SECTIONS = {
    "preprocess": PreprocessConfig,
    "ssgsea": SsgseaConfig,
    "train": TrainConfig,
    "model": ModelConfig,
}


def load_config(path):
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    for section, cls in _CONFIG_SECTIONS.items():
        if section in cfg:
            _section(cfg, section, cls)  # validate field names eagerly
    return cfg


def _section(cfg, name, cls, **overrides):
    """Build a config dataclass from a config section, naming bad fields."""
    values = dict(cfg.get(name, {}))
    allowed = set(cls.__dataclass_fields__)
    for key in values:
        if key not in allowed:
            raise ConfigError(f"unknown field {name}.{key}")
    values.update(overrides)
    return cls(**values)


def _require_path(cfg, dotted):
    cur = cfg
    for part in dotted.split("."):
        if not isinstance(cur, dict) or part not in cur:
            raise ConfigError(f"missing config field: {dotted}")
        cur = cur[part]
    return cur


def _outpath(args, name):
    os.makedirs(args.out_dir, exist_ok=True)
    return os.path.join(args.out_dir, name)


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _write_curve(path, history):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,val_loss\n")
        for e, (tr, va) in enumerate(zip(history["train_loss"], history["val_loss"])):
            fh.write(f"{e},{tr!r},{va!r}\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args):
    cfg = load_config(args.config).get("synth", {})
    expr, geoms, sets, patch, _ = synthgen.gen_st_dataset(
        seed=args.seed,
        n_spots=cfg.get("n_spots", 600),
        n_genes=cfg.get("n_genes", 120),
        n_pathways=cfg.get("n_pathways", 10),
        noise_sigma=cfg.get("noise_sigma", 0.05),
        coupling=cfg.get("coupling", 0.95),
        n_slides=cfg.get("n_slides", 2),
        d_img=cfg.get("d_img", 64),
    )
    data_io.write_expression(expr, _outpath(args, "expression.tsv"))
    data_io.write_coords(geoms, _outpath(args, "coords.csv"))
    data_io.write_gmt(sets, _outpath(args, "gene_sets.gmt"))
    data_io.write_features(patch, _outpath(args, "features.tsv"))
    table, embeddings, _ = synthgen.gen_survival_cohort(
        seed=args.seed,
        n_subjects=cfg.get("n_subjects", 100),
        censor_rate=cfg.get("censor_rate", 0.3),
        embed_dim=cfg.get("embed_dim", 256),
    )
    data_io.write_survival(table, _outpath(args, "survival.csv"))
    _write_slide_embeddings(embeddings, _outpath(args, "survival_embeddings.tsv"))
    return 0


def _write_slide_embeddings(embeddings, path):
    d = next(iter(embeddings.values())).shape[1]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("spot_id\tslide_id\t" + "\t".join(f"e{j}" for j in range(d)) + "\n")
        for slide in sorted(embeddings):
            for i, row in enumerate(embeddings[slide]):
                fh.write(
                    f"{slide}_s{i}\t{slide}\t" + "\t".join(repr(float(v)) for v in row) + "\n"
                )


def _read_slide_embeddings(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    header = lines[0].split("\t")
    if header[:2] != ["spot_id", "slide_id"]:
        raise data_io.DataFormatError("expected header starting 'spot_id\\tslide_id'")
    out = {}
    for line in lines[1:]:
        fields = line.split("\t")
        out.setdefault(fields[1], []).append([float(v) for v in fields[2:]])
    return {k: np.asarray(v) for k, v in out.items()}


def cmd_preprocess(args):
    cfg = load_config(args.config)
    pcfg = _section(cfg, "preprocess", PreprocessConfig)
    m = data_io.parse_expression(args.expression)
    geoms = data_io.read_coords(args.coords)
    normed, hvg, hvg_ids = preprocess.run_pipeline(m, geoms, pcfg)
    data_io.write_expression(normed, _outpath(args, "normalized.tsv"))
    data_io.write_expression(hvg, _outpath(args, "hvg.tsv"))
    with open(_outpath(args, "hvg_genes.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(hvg_ids) + "\n")
    return 0


def cmd_score_pathways(args):
    cfg = load_config(args.config)
    scfg = _section(cfg, "ssgsea", SsgseaConfig, rng_seed=args.seed)
    m = data_io.parse_expression(args.expression, value_kind=data_io.NORMALIZED_LOG)
    sets = data_io.read_gmt(args.gene_sets)
    sm, dropped = ssgsea.score_matrix(m, sets, scfg, threads=args.threads)
    data_io.write_scores(sm, _outpath(args, "scores.tsv"))
    with open(_outpath(args, "dropped_pathways.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(dropped) + ("\n" if dropped else ""))
    return 0


def _load_dataset(scores_path, coords_path, features_path, hvg_path):
    sm = data_io.read_scores(scores_path)
    geoms = {g.spot_id: g for g in data_io.read_coords(coords_path)}
    patch = data_io.read_features(features_path)
    hvg = data_io.parse_expression(hvg_path, value_kind=data_io.NORMALIZED_LOG)
    feat_index = {s: i for i, s in enumerate(patch.spot_ids)}
    hvg_index = {s: i for i, s in enumerate(hvg.spot_ids)}
    missing = [s for s in sm.spot_ids if s not in geoms or s not in feat_index or s not in hvg_index]
    if missing:
        raise PearlError(f"spot {missing[0]!r} missing from coords/features/hvg inputs")
    hvg_dense = hvg.dense()
    coords = np.array([[geoms[s].x, geoms[s].y] for s in sm.spot_ids])
    return SpotDataset(
        spot_ids=list(sm.spot_ids),
        slide_ids=[geoms[s].slide_id for s in sm.spot_ids],
        scores=sm.scores,
        coords=coords,
        features=patch.features[[feat_index[s] for s in sm.spot_ids]],
        y_path=sm.scores,
        y_gene=hvg_dense[[hvg_index[s] for s in sm.spot_ids]],
    ), sm, hvg


def _model_config(cfg, dataset, seed):
    return _section(
        cfg,
        "model",
        ModelConfig,
        n_pathways=dataset.scores.shape[1],
        n_genes=dataset.y_gene.shape[1],
        d_img=dataset.features.shape[1],
        seed=seed,
    )


def cmd_train_contrastive(args):
    cfg = load_config(args.config)
    tcfg = _section(cfg, "train", TrainConfig, seed=args.seed)
    dataset, _, _ = _load_dataset(args.scores, args.coords, args.features, args.hvg)
    model = PearlModel(_model_config(cfg, dataset, args.seed))
    model, history, normalizer = trainer.train_stage1(dataset, model, tcfg)
    save_model(model, _outpath(args, "stage1"), normalizer=normalizer)
    _write_curve(_outpath(args, "stage1_loss.csv"), history)
    return 0


def cmd_train_heads(args):
    cfg = load_config(args.config)
    tcfg = _section(cfg, "train", TrainConfig, seed=args.seed)
    dataset, _, _ = _load_dataset(args.scores, args.coords, args.features, args.hvg)
    model, normalizer, _ = load_model(args.checkpoint)
    model, history = trainer.train_stage2(dataset, model, tcfg)
    save_model(model, _outpath(args, "final"), normalizer=normalizer)
    _write_curve(_outpath(args, "stage2_loss.csv"), history)
    return 0


def cmd_predict(args):
    model, _, _ = load_model(args.checkpoint)
    patch = data_io.read_features(args.features)
    h = trainer.embed_images(model, patch.features)
    yp, yg = model.predict_heads(h)
    path_names = [f"p{j}" for j in range(yp.values.shape[1])]
    gene_names = [f"g{j}" for j in range(yg.values.shape[1])]
    data_io.write_scores(
        data_io.PathwayScoreMatrix(patch.spot_ids, path_names, yp.values.astype(np.float64)),
        _outpath(args, "yhat_path.tsv"),
    )
    data_io.write_scores(
        data_io.PathwayScoreMatrix(patch.spot_ids, gene_names, yg.values.astype(np.float64)),
        _outpath(args, "yhat_gene.tsv"),
    )
    if args.emit_embeddings:
        slide_of = {}
        if args.coords:
            slide_of = {g.spot_id: g.slide_id for g in data_io.read_coords(args.coords)}
        with open(_outpath(args, "embeddings.tsv"), "w", encoding="utf-8") as fh:
            fh.write(
                "spot_id\tslide_id\t" + "\t".join(f"e{j}" for j in range(h.shape[1])) + "\n"
            )
            for sid, row in zip(patch.spot_ids, h):
                fh.write(
                    f"{sid}\t{slide_of.get(sid, '')}\t"
                    + "\t".join(repr(float(v)) for v in row)
                    + "\n"
                )
    return 0


def cmd_evaluate(args):
    pred = data_io.read_scores(args.pred)
    truth = data_io.read_scores(args.truth)
    if pred.spot_ids != truth.spot_ids:
        raise PearlError("prediction and truth spot ids differ")
    report = evaluate_expression(pred.scores, truth.scores, truth.pathway_names)
    _write_json(_outpath(args, "report.json"), report.to_dict())
    with open(_outpath(args, "per_target_pcc.csv"), "w", encoding="utf-8") as fh:
        fh.write("target,pcc\n")
        names = report.target_names or [str(j) for j in range(report.n_targets)]
        for name, v in zip(names, report.per_target_pcc):
            fh.write(f"{name},{v!r}\n")
    return 0


def _subject_arrays(table, embeddings):
    mats, times, events = [], [], []
    for r in table.rows:
        rows = [embeddings[s] for s in r.slide_ids if s in embeddings]
        if not rows:
            raise PearlError(f"subject {r.subject_id!r}: no embeddings for its slides")
        mats.append(np.concatenate(rows, axis=0))
        times.append(r.time)
        events.append(r.event)
    return mats, np.array(times), np.array(events)


def cmd_survival_train(args):
    cfg = load_config(args.config).get("survival", {})
    table = data_io.read_survival(args.survival)
    embeddings = _read_slide_embeddings(args.embeddings)
    mats, times, events = _subject_arrays(table, embeddings)
    scfg = survival.SurvivalTrainConfig(seed=args.seed, **cfg)
    head, history = survival.train_cox(mats, times, events, scfg)
    survival.save_cox(head, _outpath(args, "cox"))
    with open(_outpath(args, "cox_loss.csv"), "w", encoding="utf-8") as fh:
        fh.write("epoch,loss\n")
        for e, v in enumerate(history):
            fh.write(f"{e},{v!r}\n")
    return 0


def cmd_survival_eval(args):
    table = data_io.read_survival(args.survival)
    embeddings = _read_slide_embeddings(args.embeddings)
    mats, times, events = _subject_arrays(table, embeddings)
    head = survival.load_cox(args.checkpoint)
    risks = survival.predict_risks(head, mats)
    ci = survival.c_index(risks, times, events)
    _write_json(_outpath(args, "survival_report.json"), {"c_index": ci, "n_subjects": len(times)})
    return 0


def cmd_gradcheck(args):
    from . import gradsuite

    results = gradsuite.run_all()
    ok = True
    for name, err in results:
        status = "PASS" if err <= 1e-4 else "FAIL"
        ok = ok and err <= 1e-4
        print(f"{status} {name}: rel err {err:.3e}")
    return 0 if ok else 1


def cmd_run_cv(args):
    cfg = load_config(args.config)
    paths = {
        key: _require_path(cfg, f"paths.{key}")
        for key in ("expression", "coords", "gene_sets", "features")
    }
    pcfg = _section(cfg, "preprocess", PreprocessConfig)
    scfg = _section(cfg, "ssgsea", SsgseaConfig, rng_seed=args.seed)
    tcfg = _section(cfg, "train", TrainConfig, seed=args.seed)

    m = data_io.parse_expression(paths["expression"])
    geoms = data_io.read_coords(paths["coords"])
    sets = data_io.read_gmt(paths["gene_sets"])
    patch = data_io.read_features(paths["features"])
    normed, hvg, hvg_ids = preprocess.run_pipeline(m, geoms, pcfg)
    sm, _ = ssgsea.score_matrix(normed, sets, scfg, threads=args.threads)

    geo_by_spot = {g.spot_id: g for g in geoms}
    feat_index = {s: i for i, s in enumerate(patch.spot_ids)}
    hvg_dense = hvg.dense()
    hvg_index = {s: i for i, s in enumerate(hvg.spot_ids)}
    dataset = SpotDataset(
        spot_ids=list(sm.spot_ids),
        slide_ids=[geo_by_spot[s].slide_id for s in sm.spot_ids],
        scores=sm.scores,
        coords=np.array([[geo_by_spot[s].x, geo_by_spot[s].y] for s in sm.spot_ids]),
        features=patch.features[[feat_index[s] for s in sm.spot_ids]],
        y_path=sm.scores,
        y_gene=hvg_dense[[hvg_index[s] for s in sm.spot_ids]],
    )

    slides = sorted(set(dataset.slide_ids))
    if len(slides) < args.folds:
        raise PearlError(f"{len(slides)} slides cannot form {args.folds} slide-disjoint folds")
    fold_of = {s: i % args.folds for i, s in enumerate(slides)}
    fold_reports = []
    for fold in range(args.folds):
        test_idx = [i for i, s in enumerate(dataset.slide_ids) if fold_of[s] == fold]
        train_idx = [i for i, s in enumerate(dataset.slide_ids) if fold_of[s] != fold]
        train_ds = dataset.subset(train_idx)
        test_ds = dataset.subset(test_idx)
        mcfg = _model_config(cfg, dataset, args.seed + fold)
        model = PearlModel(mcfg)
        model, _, normalizer = trainer.train_stage1(train_ds, model, tcfg)
        model, _ = trainer.train_stage2(train_ds, model, tcfg)
        h_test = trainer.embed_images(model, test_ds.features, tcfg.batch_size)
        yp, yg = model.predict_heads(h_test)
        path_rep = evaluate_expression(yp.values, test_ds.y_path)
        gene_rep = evaluate_expression(yg.values, test_ds.y_gene)
        top1 = trainer.retrieval_top1(model, test_ds, normalizer, tcfg.batch_size, seed=args.seed)
        report = {
            "fold": fold,
            "pathway": path_rep.to_dict(),
            "gene": gene_rep.to_dict(),
            "retrieval_top1": top1,
            "n_test_spots": test_ds.n_spots,
        }
        fold_reports.append(report)
        _write_json(_outpath(args, f"fold_{fold}.json"), report)

    def agg(path_key, metric):
        vals = np.array([r[path_key][metric] for r in fold_reports], dtype=np.float64)
        return {"mean": float(vals.mean()), "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0}

    aggregate = {
        "folds": args.folds,
        "seed": args.seed,
        "pathway": {m: agg("pathway", m) for m in ("mean_pcc", "mse", "mae")},
        "gene": {m: agg("gene", m) for m in ("mean_pcc", "mse", "mae")},
        "retrieval_top1": {
            "mean": float(np.mean([r["retrieval_top1"] for r in fold_reports])),
            "std": float(np.std([r["retrieval_top1"] for r in fold_reports], ddof=1))
            if len(fold_reports) > 1
            else 0.0,
        },
    }
    _write_json(_outpath(args, "aggregate.json"), aggregate)
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="pearl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **flags):
        p = sub.add_parser(name)
        p.set_defaults(fn=fn)
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--out-dir", default=".")
        for flag, required in flags.items():
            p.add_argument(f"--{flag.replace('_', '-')}", required=required, default=None)
        return p

    add("synth", cmd_synth)
    add("preprocess", cmd_preprocess, expression=True, coords=True)
    add("score-pathways", cmd_score_pathways, expression=True, gene_sets=True)
    add(
        "train-contrastive",
        cmd_train_contrastive,
        scores=True,
        coords=True,
        features=True,
        hvg=True,
    )
    add(
        "train-heads",
        cmd_train_heads,
        checkpoint=True,
        scores=True,
        coords=True,
        features=True,
        hvg=True,
    )
    p = add("predict", cmd_predict, checkpoint=True, features=True, coords=False)
    p.add_argument("--emit-embeddings", action="store_true")
    add("evaluate", cmd_evaluate, pred=True, truth=True)
    add("survival-train", cmd_survival_train, embeddings=True, survival=True)
    add("survival-eval", cmd_survival_eval, checkpoint=True, embeddings=True, survival=True)
    add("gradcheck", cmd_gradcheck)
    p = add("run-cv", cmd_run_cv)
    p.add_argument("--folds", type=int, default=5)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except PearlError as exc:
        json.dump({"error": exc.code, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
