"""Command-line interface.

Exit codes: 0 success, 2 usage error, 3 malformed config, 4 missing file,
5 invalid data or checkpoint, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import LEVELS, ConfigError, TrainConfig, hyper_from_flat, load_config_file
from .dataio import BundleError, DatasetError, load_dataset, read_bundle
from .evaluation import DEFAULT_KS, MODES, EvaluationError, encode, evaluate, export_interactions, \
    rank_candidates, score_matrix
from .params import HeadParams
from .synth import SynthConfig, write_synthetic

log = logging.getLogger("outfitret")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_CONFIG, EXIT_MISSING, EXIT_DATA = 0, 1, 2, 3, 4, 5
DEFAULT_RUN = "run"
CHECKPOINT_NAME = "checkpoint.npz"

# flag name -> config key, for options shared by train/eval/query
_OVERRIDES = {
    "p": "p", "alpha": "alpha", "beta": "beta", "logit_scale": "logit_scale",
    "temperature_mode": "temperature_mode", "k_o": "k_o", "k_t": "k_t", "heads": "heads",
    "lr": "lr", "epochs": "epochs", "batch_size": "batch_size", "seed": "seed",
}


def _add_hyper_flags(p: argparse.ArgumentParser, training: bool):
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--p", type=float, help="task weight of the text-token WTI term")
    p.add_argument("--alpha", type=float, help="style-level loss / score weight")
    p.add_argument("--beta", type=float, help="outfit-level loss / score weight")
    p.add_argument("--lambda", dest="logit_scale", type=float, help="logit scale (temperature)")
    p.add_argument("--temperature-mode", choices=("scale", "divide"))
    p.add_argument("--k-o", type=float, help="outfit centroid ratio")
    p.add_argument("--k-t", type=float, help="text centroid ratio")
    p.add_argument("--heads", type=int)
    p.add_argument("--share-style-wti", action="store_true", default=None)
    p.add_argument("--no-greedy-init", action="store_true",
                   help="seed K-means with random distinct tokens instead of greedy selection")
    if training:
        p.add_argument("--preset", choices=("desk", "paper"), default="desk")
        p.add_argument("--lr", type=float)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--levels", help=f"comma list from {','.join(LEVELS)} ('none' for no levels)")
        p.add_argument("--keep-last", action="store_true", help="pad the short final batch")
        p.add_argument("--checkpoint-every", type=int)
        p.add_argument("--not-reproducible", action="store_true",
                       help="record wall time in the training log")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="outfitret", description="Text-to-outfit retrieval head")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic planted-style dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--outfits", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--archetypes", type=int, default=16)
    p.add_argument("--distractor-rate", type=float, default=0.2)
    p.add_argument("--splits", default="0.8,0.1,0.1", help="train,valid,test fractions")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("train", help="train the head on a dataset split")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--out", help=f"run directory (default <data>/{DEFAULT_RUN})")
    p.add_argument("--init", help="checkpoint to resume from")
    p.add_argument("--json", action="store_true")
    _add_hyper_flags(p, training=True)

    p = sub.add_parser("eval", help="Recall@k over a split")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--checkpoint", help=f"default <data>/{DEFAULT_RUN}/{CHECKPOINT_NAME}")
    p.add_argument("--untrained", action="store_true", help="evaluate freshly initialized params")
    p.add_argument("--mode", choices=MODES, default="item-t2o")
    p.add_argument("--ks", default=",".join(map(str, DEFAULT_KS)))
    p.add_argument("--results", help="write per-query rankings (JSON lines)")
    p.add_argument("--json", action="store_true")
    _add_hyper_flags(p, training=False)

    p = sub.add_parser("query", help="rank a split's outfits for one precomputed text record")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--text-bundle", required=True, help="bundle holding the query embedding")
    p.add_argument("--query-id", help="record id inside the bundle (default: first record)")
    p.add_argument("--checkpoint")
    p.add_argument("--untrained", action="store_true")
    p.add_argument("--mode", choices=MODES, default="item-t2o")
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--json", action="store_true")
    _add_hyper_flags(p, training=False)

    p = sub.add_parser("export-interactions", help="dump item/style token interaction matrices")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--outfit-id", required=True)
    p.add_argument("--out", required=True, help="output path stem")
    p.add_argument("--checkpoint")
    p.add_argument("--untrained", action="store_true")
    p.add_argument("--json", action="store_true")
    _add_hyper_flags(p, training=False)

    p = sub.add_parser("inspect-checkpoint", help="summarize a checkpoint")
    p.add_argument("path")
    p.add_argument("--json", action="store_true")
    return parser


def _overrides(args) -> dict:
    flat = {}
    if getattr(args, "config", None):
        flat.update(load_config_file(args.config))
    for flag, key in _OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            flat[key] = value
    if getattr(args, "no_greedy_init", False):
        flat["greedy_init"] = False
    if getattr(args, "share_style_wti", None):
        flat["share_style_wti"] = True
    return flat


def _emit(args, payload: dict, human: str):
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(human)


def _cmd_synth(args):
    fractions = tuple(float(x) for x in args.splits.split(","))
    if len(fractions) != 3:
        raise ConfigError("--splits needs three comma-separated fractions")
    cfg = SynthConfig(outfits=args.outfits, seed=args.seed, dim=args.dim, sigma=args.sigma,
                      archetypes=args.archetypes, distractor_rate=args.distractor_rate,
                      split_fractions=fractions)
    datasets, _ = write_synthetic(cfg, args.out)
    sizes = {k: len(v) for k, v in datasets.items()}
    _emit(args, {"out": str(args.out), "splits": sizes},
          f"wrote {sum(sizes.values())} outfits to {args.out} ({sizes})")


def _cmd_train(args):
    from .trainer import train

    flat = _overrides(args)
    dataset = load_dataset(args.data, args.split)
    flat.setdefault("dim", dataset.dim)
    if args.levels:
        flat["levels"] = [] if args.levels == "none" else [x.strip() for x in args.levels.split(",")]
    if args.keep_last:
        flat["drop_last"] = False
    if args.checkpoint_every is not None:
        flat["checkpoint_every"] = args.checkpoint_every
    if args.not_reproducible:
        flat["reproducible"] = False
    config = TrainConfig.from_preset(args.preset, **flat)
    params = optimizer = None
    if args.init:
        ckpt = load_checkpoint(args.init)
        params, optimizer = ckpt.params, ckpt.optimizer
    run = Path(args.out) if args.out else Path(args.data) / DEFAULT_RUN
    run.mkdir(parents=True, exist_ok=True)
    params, tlog, state = train(dataset, config, params, optimizer, log_path=run / "train_log.jsonl",
                                checkpoint_dir=run)
    ckpt_path = save_checkpoint(run / CHECKPOINT_NAME, params, config.to_flat(), state)
    last = tlog.epochs[-1]
    _emit(args, {"checkpoint": str(ckpt_path), "epochs": len(tlog.epochs), "final_loss": last.loss},
          f"trained {len(tlog.epochs)} epochs on {len(dataset)} outfits; "
          f"final loss {last.loss:.4f}; checkpoint {ckpt_path}")


def _params_for(args, dim: int):
    flat = _overrides(args)
    if args.untrained:
        flat.setdefault("dim", dim)
        hyper = TrainConfig.from_flat(flat).hyper
        return HeadParams.init(hyper), hyper
    path = Path(args.checkpoint) if args.checkpoint else Path(args.data) / DEFAULT_RUN / CHECKPOINT_NAME
    ckpt = load_checkpoint(path)
    merged = dict(ckpt.config)
    merged.update(flat)
    hyper = hyper_from_flat(merged)
    if ckpt.params.dim != dim:
        raise DatasetError(f"checkpoint width {ckpt.params.dim} != dataset width {dim}")
    return ckpt.params, hyper


def _cmd_eval(args):
    dataset = load_dataset(args.data, args.split)
    params, hyper = _params_for(args, dataset.dim)
    ks = tuple(int(k) for k in args.ks.split(","))
    metrics, _ = evaluate(dataset, params, hyper, args.mode, ks, args.results)
    human = "  ".join(f"{k}={v:.4f}" for k, v in metrics.items() if k.startswith("R@"))
    _emit(args, metrics, f"{human}  (queries={metrics['queries']}, mode={args.mode})")


def _cmd_query(args):
    dataset = load_dataset(args.data, args.split)
    params, hyper = _params_for(args, dataset.dim)
    bundle = read_bundle(args.text_bundle)
    if bundle.dim != dataset.dim:
        raise DatasetError(f"query bundle D={bundle.dim} != dataset D={dataset.dim}")
    qid = args.query_id or next(iter(bundle.records), None)
    if qid is None or qid not in bundle:
        raise DatasetError(f"query record {qid!r} not found in {args.text_bundle}")
    from .dataio import OutfitSample

    e_t = bundle[qid]
    # outfit side is unused for a text-only record
    query = OutfitSample(qid, ["-"], np.zeros((1, bundle.dim), np.float32),
                         [f"tok{j}" for j in range(e_t.shape[0])], e_t, "query")
    need = args.mode == "combined"
    enc_o = encode(dataset, params, hyper, "o", need)
    enc_t = encode([query], params, hyper, "t", need)
    scores = score_matrix(enc_o, enc_t, params, hyper, args.mode)[:, 0]
    ids = [s.outfit_id for s in dataset]
    result = rank_candidates(scores, ids, qid, gt_id=qid if qid in ids else None, top=args.top)
    payload = {"query": qid, "mode": args.mode,
               "ranking": [{"outfit_id": i, "score": s} for i, s in result.ranking]}
    human = "\n".join(f"{n + 1:3d}  {i}  {s:.6f}" for n, (i, s) in enumerate(result.ranking))
    _emit(args, payload, human)


def _cmd_export(args):
    dataset = load_dataset(args.data, args.split)
    params, hyper = _params_for(args, dataset.dim)
    sample = next((s for s in dataset if s.outfit_id == args.outfit_id), None)
    if sample is None:
        raise DatasetError(f"outfit {args.outfit_id!r} not in split {args.split}")
    exp = export_interactions(sample, params, hyper, args.out)
    _emit(args, {"out": str(args.out), "item_shape": list(exp.item_matrix.shape),
                 "style_shape": list(exp.style_matrix.shape)},
          f"wrote interactions for {sample.outfit_id}: item {exp.item_matrix.shape}, "
          f"style {exp.style_matrix.shape}")


def _cmd_inspect(args):
    ckpt = load_checkpoint(args.path)
    counts = {k: list(v.shape) for k, v in ckpt.params.items()}
    total = int(sum(v.size for _, v in ckpt.params.items()))
    payload = {"version": ckpt.version, "config": ckpt.config, "parameters": total,
               "shapes": counts, "optimizer_step": ckpt.optimizer.step if ckpt.optimizer else None}
    human = (f"checkpoint v{ckpt.version}: {total} parameters in {len(counts)} arrays, "
             f"dim={ckpt.params.dim}, optimizer step {payload['optimizer_step']}")
    _emit(args, payload, human)


COMMANDS = {"synth": _cmd_synth, "train": _cmd_train, "eval": _cmd_eval, "query": _cmd_query,
            "export-interactions": _cmd_export, "inspect-checkpoint": _cmd_inspect}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (DatasetError, BundleError, CheckpointError, EvaluationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.debug("unhandled error", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
