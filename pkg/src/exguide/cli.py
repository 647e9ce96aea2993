"""Command-line entry point: ``exguide <command> --config run.ini``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import artifacts, dynamics, evaluation as ev, experiments as ex, retrieval
from .artifacts import ArtifactError
from .config import METHODS, TOOL_VERSION, ExperimentConfig, load as load_config


def _log(msg: str):
    print(msg, file=sys.stderr)


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    over = {}
    if args.seed is not None:
        over["train.seed"] = args.seed
    if args.out:
        over["out"] = args.out
    if getattr(args, "method", None):
        over["method"] = args.method
    if getattr(args, "k", None):
        over["retrieval.K"] = args.k
    if getattr(args, "samples", None):
        over["eval.samples"] = args.samples
    return (cfg.with_overrides(**over) if over else cfg).validate()


def _stamp(cfg, stage):
    return cfg.stamp(stage)


# ---------------------------------------------------------------- loaders

def _dataset(cfg):
    p = artifacts.path_for(cfg.out, "data")
    artifacts.check(p, cfg.stage_hash("data"))
    return dynamics.load(p)[0]


def _encoder(cfg):
    p = artifacts.path_for(cfg.out, "features")
    artifacts.check(p, cfg.stage_hash("features"))
    return ex.load_encoder(p)[0]


def _index(cfg):
    p = artifacts.path_for(cfg.out, "index")
    artifacts.check(p, cfg.stage_hash("index"))
    return retrieval.load_index(p)[0]


def _prepared(cfg):
    ds, enc = _dataset(cfg), _encoder(cfg)
    return ds, enc, ex.prepare(cfg, ds, enc, index=_index(cfg))


def _trained(cfg, method):
    p = artifacts.path_for(cfg.out, "train", method)
    c = cfg.with_overrides(method=method)
    artifacts.check(p, c.stage_hash("train"))
    return ex.load_trained(p)[1]


# ---------------------------------------------------------------- commands

def cmd_gen(cfg, force=False) -> Path:
    p = artifacts.guard(artifacts.path_for(cfg.out, "data"), force)
    ds = dynamics.generate(cfg.data)
    dynamics.save(ds, p, _stamp(cfg, "data"))
    return p


def cmd_train_disentangle(cfg, force=False) -> Path:
    p = artifacts.guard(artifacts.path_for(cfg.out, "features"), force)
    ds = _dataset(cfg)
    enc = ex.make_encoder(cfg, ds, log=_log)
    ex.save_encoder(enc, p, _stamp(cfg, "features"))
    return p


def cmd_index(cfg, force=False) -> Path:
    p = artifacts.guard(artifacts.path_for(cfg.out, "index"), force)
    ds, enc = _dataset(cfg), _encoder(cfg)
    F = ex.feature_array(enc, ds.train)
    index = ex.index_over(F, [s.id for s in ds.train], ds.spec.M, cfg.retrieval.use_diff)
    retrieval.save_index(index, p, _stamp(cfg, "index"))
    return p


def cmd_train(cfg, force=False) -> Path:
    p = artifacts.guard(artifacts.path_for(cfg.out, "train", cfg.method), force)
    _, _, prep = _prepared(cfg)
    nets, history = ex.train_method(cfg, prep, log=_log)
    meta = _stamp(cfg, "train")
    meta["plateau_epoch"] = history.plateau_epoch
    ex.save_trained(cfg.method, nets, p, meta)
    p.with_name(f"{cfg.method}_log.csv").write_text(artifacts.stamp_line(meta) + "\n" + history.to_csv())
    return p


def cmd_predict(cfg, seq_id: int, force=False) -> Path:
    p = artifacts.guard(Path(cfg.out) / f"pred_{cfg.method}_{seq_id}.json", force)
    ds, enc = _dataset(cfg), _encoder(cfg)
    index = _index(cfg)
    byid = ds.by_id()
    if seq_id not in byid:
        raise ArtifactError(f"sequence {seq_id} not in dataset")
    nets = _trained(cfg, cfg.method)
    F = ex.feature_array(enc, [byid[seq_id]])
    es = retrieval.retrieve(F[0].T, index, cfg.retrieval.K, exclude_id=seq_id)
    E = es.features.transpose(0, 2, 1)[None]
    P = ex.sample(cfg.method, nets, F[:, :ds.spec.M], E, cfg.eval.samples, ds.spec.H,
                  cfg.eval.seed, cfg.train.first_step_noise)
    doc = {**_stamp(cfg, "eval"), "method": cfg.method, "query_id": seq_id,
           "omega": es.omega, "preds": P[0].tolist()}
    p.write_text(json.dumps(doc, sort_keys=True) + "\n")
    return p


def _write_report(rep: ev.EvalReport, timing: dict, stem: Path, force: bool) -> Path:
    p = artifacts.guard(stem.with_suffix(".json"), force)
    rep.extra["tool_version"] = TOOL_VERSION
    rep.save(p)
    header = artifacts.stamp_line({"config_hash": rep.config_hash, "seed": rep.seed,
                                   "tool_version": TOOL_VERSION})
    stem.with_name(stem.name + "_curves.csv").write_text(header + "\n" + ev.curves_csv([rep]))
    svg = ev.svg_lines({rep.method: (range(1, len(rep.per_step) + 1), rep.per_step)},
                       title=f"{rep.method} per-step error", xlabel="t", ylabel="MSE")
    stem.with_name(stem.name + ".svg").write_text(f"<!-- {header[2:]} -->\n" + svg)
    # wall-clock numbers vary run to run, so they live beside the report
    stem.with_name(stem.name + "_timing.json").write_text(json.dumps(timing, sort_keys=True) + "\n")
    return p


def cmd_eval(cfg, force=False) -> Path:
    _, _, prep = _prepared(cfg)
    nets = _trained(cfg, cfg.method)
    rep, timing = ex.evaluate(cfg, prep, cfg.method, nets, config_hash=cfg.stage_hash("eval"))
    return _write_report(rep, timing, Path(cfg.out) / f"eval_{cfg.method}", force)


def _trained_or_fit(cfg, prep, method, force):
    p = artifacts.path_for(cfg.out, "train", method)
    if p.exists():
        return _trained(cfg, method)
    nets, _ = ex.train_method(cfg, prep, method, log=_log)
    return nets


def cmd_ablate(cfg, axis: str, force=False) -> list[Path]:
    out = Path(cfg.out) / f"ablate_{axis}"
    ds, enc = _dataset(cfg), _encoder(cfg)
    paths = []
    if axis == "k_sweep":
        for rep in ex.k_sweep(cfg, ds, enc, log=_log):
            paths.append(_write_report(rep, {}, out / f"eval_{cfg.method}_K{rep.extra['K']}", force))
    elif axis == "random_examples":
        for random in (False, True):
            c = cfg.with_overrides(**{"retrieval.random": random})
            prep = ex.prepare(c, ds, enc)
            nets = _trained_or_fit(c, prep, c.method, force) if not random else \
                ex.train_method(c, prep, log=_log)[0]
            rep, timing = ex.evaluate(c, prep, c.method, nets, config_hash=c.stage_hash("eval"))
            tag = "random" if random else "retrieved"
            paths.append(_write_report(rep, timing, out / f"eval_{c.method}_{tag}", force))
    elif axis == "unseen_class":
        prep = ex.prepare(cfg, ds, enc)
        for method in ("vpeg", "fixed_prior"):
            c = cfg.with_overrides(method=method)
            nets = _trained_or_fit(c, prep, method, force)
            rep, timing = ex.unseen_class_eval(c, ds, enc, prep, method, nets,
                                               config_hash=c.stage_hash("eval"))
            paths.append(_write_report(rep, timing, out / f"eval_{method}_unseen", force))
    else:
        raise ValueError(f"unknown ablation axis {axis!r}")
    return paths


def cmd_retrieve(cfg, seq_id: int) -> dict:
    ds, enc, index = _dataset(cfg), _encoder(cfg), _index(cfg)
    byid = ds.by_id()
    if seq_id not in byid:
        raise ArtifactError(f"sequence {seq_id} not in dataset")
    F = ex.feature_array(enc, [byid[seq_id]])[0].T
    return retrieval.example_set_json(seq_id, retrieval.retrieve(F, index, cfg.retrieval.K, seq_id))


def cmd_run(cfg, force=False) -> Path:
    """gen -> features -> index -> train -> eval in one go."""
    cmd_gen(cfg, force)
    cmd_train_disentangle(cfg, force)
    cmd_index(cfg, force)
    cmd_train(cfg, force)
    return cmd_eval(cfg, force)


# ---------------------------------------------------------------- argparse

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="exguide", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", type=Path, help="INI config file")
        p.add_argument("--seed", type=int, help="training seed override")
        p.add_argument("--out", help="artifact directory override")
        p.add_argument("--force", action="store_true", help="overwrite existing artifacts")
        return p

    add("gen", "generate the dataset")
    add("train-disentangle", "fit (or bypass) the appearance/motion encoder")
    add("index", "build the retrieval index over training features")
    for name, help in (("train", "train a predictor"), ("eval", "evaluate a trained predictor"),
                       ("run", "full pipeline")):
        p = add(name, help)
        p.add_argument("--method", choices=METHODS)
        p.add_argument("--k", type=int, help="number of retrieved examples")
        p.add_argument("--samples", type=int, help="samples per case at evaluation")
    p = add("predict", "sample futures for one sequence")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--k", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--seq-id", type=int, required=True)
    p = add("ablate", "ablation bundle")
    p.add_argument("axis", choices=("k_sweep", "random_examples", "unseen_class"))
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--samples", type=int)
    p = add("retrieve", "print the example set of one sequence")
    p.add_argument("--k", type=int)
    p.add_argument("--seq-id", type=int, required=True)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        c = args.command
        if c == "gen":
            out = cmd_gen(cfg, args.force)
        elif c == "train-disentangle":
            out = cmd_train_disentangle(cfg, args.force)
        elif c == "index":
            out = cmd_index(cfg, args.force)
        elif c == "train":
            out = cmd_train(cfg, args.force)
        elif c == "predict":
            out = cmd_predict(cfg, args.seq_id, args.force)
        elif c == "eval":
            out = cmd_eval(cfg, args.force)
        elif c == "ablate":
            out = "\n".join(str(p) for p in cmd_ablate(cfg, args.axis, args.force))
        elif c == "retrieve":
            out = json.dumps(cmd_retrieve(cfg, args.seq_id), sort_keys=True)
        else:
            out = cmd_run(cfg, args.force)
    except (ArtifactError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
