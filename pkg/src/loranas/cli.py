"""Command-line entry point.

Subcommands: ``search``, ``finetune``, ``eval``, ``count-params``, ``export``.
Settings are resolved as built-in defaults, then a JSON ``--config`` file,
then command-line flags.  Machine-readable artifacts go to ``--out``
(default ``$LORANAS_OUTPUT_DIR`` or ``./runs``); a short summary goes to
stdout and errors to stderr.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .accounting import compression_ratio, format_millions, load_descriptor, lora_param_count
from .data import gen_task, load_corpus
from .model import FrozenTransformer, ModelConfig, eval_perplexity, load_checkpoint, save_checkpoint
from .report import RunManifest, export_metrics_csv, export_rank_map, load_rank_map
from .search import SearchConfig, SearchEngine, SearchState, run_finetune

log = logging.getLogger("loranas")

MODEL_KEYS = [f.name for f in fields(ModelConfig) if f.name not in ("seed", "targets")]
SEARCH_KEYS = [f.name for f in fields(SearchConfig) if f.name not in ("seed", "targets")]
DATA_DEFAULTS = {"task": "copy", "size": 1000, "length": 6, "alphabet": 16, "modulus": 2, "grid": 3,
                 "data": None, "data_seed": None}
COMMON_DEFAULTS = {"seed": 0, "targets": "Q,K,V,O,G,U,D"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n\n{self.format_help()}")


def _size(text: str) -> float:
    t = text.strip().upper()
    mult = {"K": 1e3, "M": 1e6, "B": 1e9}.get(t[-1:], 1.0)
    return float(t[:-1] if t[-1:] in "KMB" else t) * mult


def _add_model_args(p):
    g = p.add_argument_group("model")
    g.add_argument("--vocab-size", type=int, dest="vocab_size")
    g.add_argument("--d-model", type=int, dest="d_model")
    g.add_argument("--n-layers", type=int, dest="n_layers")
    g.add_argument("--n-heads", type=int, dest="n_heads")
    g.add_argument("--d-mlp", type=int, dest="d_mlp")
    g.add_argument("--max-seq-len", type=int, dest="max_seq_len")
    g.add_argument("--targets", help="adapted projections, e.g. Q,K,V,O,G,U,D (FC1/FC2 alias U/D)")


def _add_data_args(p):
    g = p.add_argument_group("data")
    g.add_argument("--task", choices=["copy", "modsum", "patchcount"])
    g.add_argument("--size", type=int, help="examples generated before the 80/10/10 split")
    g.add_argument("--length", type=int, help="copy/modsum sequence length")
    g.add_argument("--alphabet", type=int, help="copy alphabet size")
    g.add_argument("--modulus", type=int, help="modsum modulus")
    g.add_argument("--grid", type=int, help="patchcount grid side")
    g.add_argument("--data", help="corpus file: one sequence of whitespace-separated token ids per line; "
                                  "replaces --task")
    g.add_argument("--data-seed", type=int, dest="data_seed", help="seed for data generation (default: --seed)")


def _add_train_args(p):
    g = p.add_argument_group("training")
    g.add_argument("--space", help="rank search space, e.g. 4,8,16")
    g.add_argument("--search-epochs", type=int, dest="search_epochs")
    g.add_argument("--finetune-epochs", type=int, dest="finetune_epochs")
    g.add_argument("--batch-size", type=int, dest="batch_size")
    g.add_argument("--lr-weights", type=float, dest="lr_weights")
    g.add_argument("--lr-alpha", type=float, dest="lr_alpha")
    g.add_argument("--weight-optimizer", choices=["sgd", "momentum", "adam"], dest="weight_optimizer")
    g.add_argument("--alpha-optimizer", choices=["sgd", "momentum", "adam"], dest="alpha_optimizer")
    g.add_argument("--clip-norm", type=float, dest="clip_norm")
    g.add_argument("--lora-alpha", type=float, dest="lora_alpha")
    g.add_argument("--reinit", action="store_const", const=True, dest="reinit_after_search",
                   help="re-initialise adapters after the search instead of warm-starting")


def _add_common(p, out=True):
    p.add_argument("--config", help="JSON file of settings; flags override it")
    p.add_argument("--seed", type=int)
    if out:
        p.add_argument("--out", help="output directory (default $LORANAS_OUTPUT_DIR or ./runs)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="loranas", description="Weight-sharing LoRA rank search on a toy transformer.")
    p.add_argument("--version", action="version", version=f"loranas {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("search", help="supernet rank search, optionally followed by fine-tuning")
    _add_common(s)
    _add_model_args(s)
    _add_data_args(s)
    _add_train_args(s)
    s.add_argument("--finetune", action="store_true", help="fine-tune the searched ranks afterwards")
    s.add_argument("--timings", action="store_true", help="add a wall_seconds column to metrics.csv")
    s.add_argument("--resume", help="continue a search from its checkpoint")

    f = sub.add_parser("finetune", help="fixed-rank fine-tuning from a rank map")
    _add_common(f)
    _add_model_args(f)
    _add_data_args(f)
    _add_train_args(f)
    f.add_argument("--rank-map", required=True, dest="rank_map")
    f.add_argument("--checkpoint", help="search checkpoint to warm-start from (default: fresh adapters)")
    f.add_argument("--timings", action="store_true")

    e = sub.add_parser("eval", help="evaluation-split perplexity of a checkpoint or the frozen base model")
    _add_common(e, out=False)
    _add_model_args(e)
    _add_data_args(e)
    e.add_argument("checkpoint", nargs="?")
    e.add_argument("--base", action="store_true", help="evaluate the frozen base model without adapters")

    c = sub.add_parser("count-params", help="LoRA parameter count for an architecture descriptor")
    c.add_argument("--descriptor", required=True, help="descriptor JSON path or shipped name")
    c.add_argument("--rank", type=int)
    c.add_argument("--rank-map", dest="rank_map", help="JSON rank map (module name -> {rank})")
    c.add_argument("--groups", help="comma-separated adapter groups (default: all)")
    c.add_argument("--compare", help="second total (e.g. 103.3M) for a compression ratio")
    c.add_argument("--json", dest="json_out", help="write the full count report here")

    x = sub.add_parser("export", help="write the rank map and metrics stored in a search checkpoint")
    x.add_argument("checkpoint")
    x.add_argument("--rank-map", dest="rank_map")
    x.add_argument("--metrics")
    x.add_argument("--timings", action="store_true")
    return p


def resolve(args) -> dict:
    """Defaults <- config file <- flags, as one flat dictionary."""
    cfg = dict(COMMON_DEFAULTS)
    cfg.update(DATA_DEFAULTS)
    mdef, sdef = ModelConfig(), SearchConfig()
    cfg.update({k: getattr(mdef, k) for k in MODEL_KEYS})
    cfg.update({k: getattr(sdef, k) for k in SEARCH_KEYS})
    cfg["space"] = ",".join(str(r) for r in sdef.space)
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        unknown = set(doc) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg.update(doc)
    for k in cfg:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    if isinstance(cfg["space"], (list, tuple)):
        cfg["space"] = ",".join(str(r) for r in cfg["space"])
    if isinstance(cfg["targets"], (list, tuple)):
        cfg["targets"] = ",".join(cfg["targets"])
    return cfg


def model_config(cfg, **over) -> ModelConfig:
    kw = {k: cfg[k] for k in MODEL_KEYS}
    kw.update(seed=cfg["seed"], targets=cfg["targets"])
    kw.update(over)
    return ModelConfig(**kw)


def search_config(cfg) -> SearchConfig:
    kw = {k: cfg[k] for k in SEARCH_KEYS}
    kw["space"] = [int(r) for r in str(cfg["space"]).split(",") if r]
    kw.update(seed=cfg["seed"], targets=cfg["targets"])
    return SearchConfig(**kw)


def datasets(cfg):
    seed = cfg["seed"] if cfg["data_seed"] is None else cfg["data_seed"]
    if cfg["data"]:
        return load_corpus(cfg["data"], seed)
    return gen_task(cfg["task"], cfg["size"], seed, length=cfg["length"], modulus=cfg["modulus"],
                    alphabet=cfg["alphabet"], grid=cfg["grid"])


def _patch_over(cfg) -> dict:
    if cfg["task"] == "patchcount" and not cfg["data"]:
        return {"patch_count": cfg["grid"] ** 2, "patch_dim": 4}
    return {}


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get("LORANAS_OUTPUT_DIR") or "runs")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def cmd_search(args) -> int:
    cfg = resolve(args)
    out = _out_dir(args)
    manifest = RunManifest("search", cfg, cfg["seed"], _now())
    ds = datasets(cfg)
    ckpt = out / "search.ckpt.npz"
    if args.resume:
        eng = SearchEngine.resume(args.resume, ds, checkpoint_path=ckpt)
    else:
        model = FrozenTransformer(model_config(cfg, **_patch_over(cfg)))
        eng = SearchEngine(model, ds, search_config(cfg), checkpoint_path=ckpt)
    rank_map, state = eng.run()
    save_checkpoint(ckpt, eng.model, {"search_state": state.to_dict(), "search_config": eng.config.to_dict(),
                                      "run_config": cfg, "rank_map": rank_map.to_dict()})
    export_rank_map(rank_map, out / "rank_map.json")
    manifest.artifacts.update(rank_map=str(out / "rank_map.json"), checkpoint=str(ckpt))
    counts = {r: list(rank_map.ranks.values()).count(r) for r in eng.config.space}
    print(f"searched {len(rank_map)} modules; rank histogram {counts}")
    if args.finetune:
        res = run_finetune(eng.model, rank_map, ds, eng.config, state)
        fck = out / "finetuned.ckpt.npz"
        save_checkpoint(fck, eng.model, {"search_state": state.to_dict(), "run_config": cfg})
        manifest.artifacts["finetuned_checkpoint"] = str(fck)
        manifest.results.update(eval_perplexity=res.perplexity, adapter_params=res.adapter_params)
        print(f"fine-tuned: eval perplexity {res.perplexity:.4f}, adapter parameters {res.adapter_params}")
    export_metrics_csv(state, out / "metrics.csv", include_time=args.timings)
    manifest.artifacts["metrics"] = str(out / "metrics.csv")
    manifest.results["wall_seconds"] = [e.wall_seconds for e in state.epochs]
    manifest.finished = _now()
    manifest.write(out / "manifest.json")
    return 0


def cmd_finetune(args) -> int:
    cfg = resolve(args)
    out = _out_dir(args)
    manifest = RunManifest("finetune", cfg, cfg["seed"], _now())
    ds = datasets(cfg)
    rank_map = load_rank_map(args.rank_map)
    if args.checkpoint:
        model, _, _ = load_checkpoint(args.checkpoint)
    else:
        model = FrozenTransformer(model_config(cfg, **_patch_over(cfg)))
    scfg = search_config(cfg)
    state = SearchState()
    res = run_finetune(model, rank_map, ds, scfg, state)
    fck = out / "finetuned.ckpt.npz"
    save_checkpoint(fck, model, {"search_state": state.to_dict(), "run_config": cfg})
    if state.epochs:
        export_metrics_csv(state, out / "metrics.csv", include_time=args.timings)
        manifest.artifacts["metrics"] = str(out / "metrics.csv")
    manifest.artifacts["finetuned_checkpoint"] = str(fck)
    manifest.results.update(eval_perplexity=res.perplexity, adapter_params=res.adapter_params)
    manifest.finished = _now()
    manifest.write(out / "manifest.json")
    print(f"eval perplexity {res.perplexity:.6f}; adapter parameters {res.adapter_params}")
    return 0


def cmd_eval(args) -> int:
    if bool(args.checkpoint) == bool(args.base):
        raise UsageError("eval: give exactly one of a checkpoint path or --base")
    if args.checkpoint:
        model, extra, _ = load_checkpoint(args.checkpoint)
        base = extra.get("run_config", {})
        cfg = resolve(args)
        for k, v in base.items():
            if k in cfg and getattr(args, k, None) is None:
                cfg[k] = v
    else:
        cfg = resolve(args)
        model = FrozenTransformer(model_config(cfg, **_patch_over(cfg)))
    ppl = eval_perplexity(model, datasets(cfg)[2])
    print(f"eval perplexity {ppl!r}")
    return 0


def cmd_count(args) -> int:
    desc = load_descriptor(args.descriptor)
    if (args.rank is None) == (args.rank_map is None):
        raise UsageError("count-params: give exactly one of --rank or --rank-map")
    ranks = args.rank if args.rank is not None else load_rank_map(args.rank_map).ranks
    groups = [g for g in args.groups.replace(" ", "").split(",") if g] if args.groups else None
    rep = lora_param_count(desc, ranks, groups)
    label = ",".join(g.upper() for g in groups) if groups else "all"
    print(f"{desc.model_name} groups={label}")
    for g, n in sorted(rep.per_group.items()):
        print(f"  {g:<4} {format_millions(n)}")
    print(f"total {rep.summary()}")
    if args.compare:
        print(f"compression ratio {compression_ratio(rep.total, _size(args.compare)):.1f}x")
    if args.json_out:
        from .report import atomic_write_text

        doc = {"total": rep.total, "fraction": rep.fraction, "per_group": rep.per_group,
               "per_tower": rep.per_tower, "per_module": rep.per_module}
        atomic_write_text(args.json_out, json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return 0


def cmd_export(args) -> int:
    if not (args.rank_map or args.metrics):
        raise UsageError("export: nothing to do; pass --rank-map and/or --metrics")
    _, extra, _ = load_checkpoint(args.checkpoint)
    if args.rank_map:
        from .supernet import RankMap

        if "rank_map" not in extra:
            raise ValueError(f"{args.checkpoint} holds no completed search")
        export_rank_map(RankMap.from_dict(extra["rank_map"]), args.rank_map)
    if args.metrics:
        export_metrics_csv(SearchState.from_dict(extra["search_state"]), args.metrics, include_time=args.timings)
    return 0


COMMANDS = {"search": cmd_search, "finetune": cmd_finetune, "eval": cmd_eval,
            "count-params": cmd_count, "export": cmd_export}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(parser.format_help())
        logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001
        print(f"loranas: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
