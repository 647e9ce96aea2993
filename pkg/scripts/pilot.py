"""Train and evaluate one or more methods on one config; write reports under pilots/.

    python scripts/pilot.py configs/stoch_bounce.ini --methods vpeg,fixed_prior \
        --set train.epochs=40 --set train.seed=1 --tag s1
"""
import argparse
import json
import time
from pathlib import Path

from exguide import config, dynamics, experiments as ex


def parse_set(cfg, items):
    over = {}
    for item in items:
        key, _, raw = item.partition("=")
        sec, _, name = key.partition(".")
        cur = getattr(getattr(cfg, sec), name) if name else getattr(cfg, sec)
        over[key] = config._parse(raw, cur)
    return cfg.with_overrides(**over) if over else cfg


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("config", type=Path)
    ap.add_argument("--methods", default="vpeg")
    ap.add_argument("--set", action="append", default=[], help="dotted override, e.g. train.epochs=40")
    ap.add_argument("--tag", default="")
    ap.add_argument("--unseen", action="store_true", help="also score the held-out-mode split")
    ap.add_argument("--out", type=Path, default=Path("pilots"))
    args = ap.parse_args()

    cfg = parse_set(config.load(args.config), args.set).validate()
    name = args.config.stem + (f"_{args.tag}" if args.tag else "")
    out = args.out / name
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(config.to_text(cfg))

    ds = dynamics.generate(cfg.data)
    enc = ex.make_encoder(cfg, ds)
    prep = ex.prepare(cfg, ds, enc)
    summary = {}
    for method in args.methods.split(","):
        c = cfg.with_overrides(method=method)
        t0 = time.perf_counter()
        nets, log = ex.train_method(c, prep)
        train_s = time.perf_counter() - t0
        (out / f"{method}_log.csv").write_text(log.to_csv())
        rep, _ = ex.evaluate(c, prep, method, nets, config_hash=c.stage_hash("eval"))
        rep.save(out / f"eval_{method}.json")
        row = {"train_seconds": round(train_s, 1), "per_step": rep.per_step,
               "best_of_p": rep.best_of_p, "mode_coverage": rep.mode_coverage,
               "variance_match": rep.variance_match}
        if args.unseen:
            urep, _ = ex.unseen_class_eval(c, ds, enc, prep, method, nets)
            urep.save(out / f"eval_{method}_unseen.json")
            row["unseen_consistency"] = urep.extra.get("mode_consistency")
        summary[method] = row
        print(method, json.dumps(row), flush=True)
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
