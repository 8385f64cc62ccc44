"""Command-line entry point.

Subcommands: synth, extract, pretrain, train, eval, infer,
dump-embeddings.  Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import data
from .checkpoint import save_arrays
from .dsp import CHANNEL_NAMES, StftConfig, extract_quartet
from .errors import QserError
from .fusion import softmax
from .model import ModelConfig, SerModel
from .qnn import QseConfig
from .train import (TrainConfig, collate, config_hash, evaluate, featurize,
                    load_checkpoint, make_batches, run_two_stage,
                    save_checkpoint, stage1_cpa, stage2_supervised)

USAGE_ERROR = 1
DATA_ERROR = 2

_TRAIN_KEYS = {"seed": int, "batch_size": int, "stage1_epochs": int,
               "stage1_lr": float, "stage1_weight_decay": float,
               "stage2_epochs": int, "stage2_lr": float,
               "stage2_weight_decay": float, "patience": int, "dtype": str}
_MODEL_KEYS = {"qse_depth": int, "qse_channels": str, "d_align": int,
               "head_hidden": int, "temperature": float, "fusion_dim": int,
               "fusion_heads": int, "fusion_depth": int,
               "classifier_hidden": int, "latent_dim": int}


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; the contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_ERROR)


def load_config(path):
    """key=value file -> (TrainConfig kwargs, ModelConfig kwargs)."""
    kv = data.parse_kv_file(path) if path else {}
    train_kw, model_kw = {}, {}
    for key, val in kv.items():
        if key in _TRAIN_KEYS:
            train_kw[key] = _TRAIN_KEYS[key](val)
        elif key in _MODEL_KEYS:
            model_kw[key] = _MODEL_KEYS[key](val)
        else:
            raise data.ParseError(f"unknown config key {key!r}")
    return train_kw, model_kw


def build_model_config(model_kw, num_classes, num_bins, zero_channel=None):
    qse_kw = {}
    if "qse_depth" in model_kw:
        qse_kw["depth"] = model_kw.pop("qse_depth")
    if "qse_channels" in model_kw:
        chans = tuple(int(c) for c in model_kw.pop("qse_channels").split(","))
        qse_kw["channels"] = chans
        qse_kw.setdefault("depth", len(chans))
    return ModelConfig(num_classes=num_classes, num_bins=num_bins,
                       qse=QseConfig(**qse_kw), zero_channel=zero_channel,
                       **model_kw)


def model_meta(model: SerModel, train_cfg, stage, extra=None):
    mc = asdict(model.cfg)
    mc["qse"]["channels"] = list(mc["qse"]["channels"])
    mc["qse"]["kernel"] = list(mc["qse"]["kernel"])
    meta = {"stage": stage, "seed": train_cfg.seed,
            "config_hash": config_hash(train_cfg, model.cfg),
            "dtype": str(np.dtype(model.dtype)), "model": mc}
    if extra:
        meta.update(extra)
    return meta


def model_from_meta(meta: dict) -> SerModel:
    mc = dict(meta["model"])
    qse = dict(mc.pop("qse"))
    qse["channels"] = tuple(qse["channels"])
    qse["kernel"] = tuple(qse["kernel"])
    cfg = ModelConfig(qse=QseConfig(**qse), **mc)
    return SerModel(cfg, seed=0, dtype=np.dtype(meta.get("dtype", "float64")))


def _prepare(args, needs_labels=True):
    """Shared setup for training subcommands."""
    train_kw, model_kw = load_config(args.config)
    if args.seed is not None:
        train_kw["seed"] = args.seed
    tcfg = TrainConfig(**train_kw)
    manifest = data.load_manifest(args.manifest)
    splits = data.split_dataset(manifest, tcfg.split_ratios, tcfg.seed)
    stft_cfg = StftConfig()
    items = [featurize(s, stft_cfg, latent_seed=tcfg.seed,
                       dtype=np.dtype(tcfg.dtype)) if len(s) else []
             for s in splits]
    mcfg = build_model_config(model_kw, len(manifest.labels),
                              stft_cfg.num_bins,
                              getattr(args, "zero_channel", None))
    model = SerModel(mcfg, seed=tcfg.seed, dtype=np.dtype(tcfg.dtype))
    return tcfg, manifest, splits, items, model


def _open_log(out_dir, name):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return open(out / name, "w", encoding="utf-8")


# --- subcommands -----------------------------------------------------------


def cmd_synth(args):
    if args.spec:
        spec = data.load_synthetic_spec(args.spec)
    else:
        spec = data.default_synthetic_spec()
    if args.seed is not None:
        spec.seed = args.seed
    manifest = data.synth_corpus(spec, args.out)
    print(f"wrote {len(manifest)} utterances "
          f"({len(spec.classes)} classes) to {args.out}")
    return 0


def cmd_extract(args):
    manifest = data.load_manifest(args.manifest)
    cfg = StftConfig()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for e in manifest.entries:
        q = extract_quartet(data.read_wav(e.path), cfg)
        save_arrays(out / f"{e.uid}.pser",
                    {"M": q.M.astype(np.float32),
                     "rho": q.rho.astype(np.float32),
                     "f_inst": q.f_inst.astype(np.float32),
                     "tau_g": q.tau_g.astype(np.float32),
                     "mask": q.mask.astype(np.float32)})
    print(f"extracted quartet features for {len(manifest)} utterances")
    return 0


def cmd_pretrain(args):
    tcfg, manifest, splits, items, model = _prepare(args)
    train_items, val_items = items[0], items[1]
    with _open_log(args.out, "pretrain_log.tsv") as log:
        model.fit_standardization(
            collate([u], model.dtype)[:2] for u in train_items)
        _, history = stage1_cpa(model, train_items, val_items, tcfg, log)
    ck = Path(args.out) / "stage1.pser"
    save_checkpoint(ck, model, model_meta(model, tcfg, stage=1,
                                          extra={"labels": manifest.labels}))
    print(f"stage 1 best validation L_CPA {min(history):.4f}; "
          f"checkpoint {ck}")
    return 0


def cmd_train(args):
    tcfg, manifest, splits, items, model = _prepare(args)
    train_items, val_items, test_items = items
    with _open_log(args.out, "train_log.tsv") as log:
        if args.checkpoint:
            load_checkpoint(args.checkpoint, model)
            _, history = stage2_supervised(model, train_items, val_items,
                                           tcfg, log, args.freeze_vocal_stage2)
        else:
            _, history = run_two_stage(model, train_items, val_items, tcfg,
                                       log, use_cpa=not args.no_cpa,
                                       freeze_vocal=args.freeze_vocal_stage2)
    ck = Path(args.out) / "stage2.pser"
    save_checkpoint(ck, model, model_meta(model, tcfg, stage=2,
                                          extra={"labels": manifest.labels}))
    met = evaluate(model, test_items, tcfg)
    print(f"best validation WA {max(history):.4f}; checkpoint {ck}")
    print(f"test WA = {met.weighted_accuracy:.4f}  "
          f"UA = {met.unweighted_accuracy:.4f}  "
          f"macroF1 = {met.macro_f1:.4f}")
    return 0


def _load_for_inference(args):
    from .checkpoint import META_KEY, load_arrays, unpack_meta
    arrays = load_arrays(args.checkpoint)
    meta = unpack_meta(arrays[META_KEY])
    model = model_from_meta(meta)
    model.load_state_arrays({k: v for k, v in arrays.items()
                             if k != META_KEY})
    return model, meta


def cmd_eval(args):
    model, meta = _load_for_inference(args)
    tcfg = TrainConfig(seed=meta.get("seed", 0))
    manifest = data.load_manifest(args.manifest)
    splits = data.split_dataset(manifest, tcfg.split_ratios, tcfg.seed)
    chosen = {"train": 0, "val": 1, "test": 2}[args.split]
    items = featurize(splits[chosen], StftConfig(), latent_seed=tcfg.seed,
                      dtype=model.dtype)
    met = evaluate(model, items, tcfg)
    print(f"WA = {met.weighted_accuracy:.4f}")
    print(f"UA = {met.unweighted_accuracy:.4f}")
    print(f"macroF1 = {met.macro_f1:.4f}")
    print("confusion matrix (rows true, cols predicted):")
    for row in met.confusion:
        print("  " + " ".join(f"{int(v):5d}" for v in row))
    return 0


def cmd_infer(args):
    model, meta = _load_for_inference(args)
    from .latent import latents_for
    cfg = StftConfig()
    w = data.read_wav(args.wav)
    q = extract_quartet(w, cfg)
    lat, lmask = latents_for(w, cfg, meta.get("seed", 0))
    from .dsp import pad_and_mask
    planes, mask = pad_and_mask([q])
    logits = model.logits(planes.astype(model.dtype),
                          mask.astype(model.dtype),
                          lat[None].astype(model.dtype),
                          lmask[None].astype(model.dtype))[0]
    probs = softmax(logits)
    labels = meta.get("labels", [str(i) for i in range(len(probs))])
    idx = int(np.argmax(probs))
    print(f"label = {labels[idx]}")
    for name, p in zip(labels, probs):
        print(f"  {name}: {p:.4f}")
    return 0


def cmd_dump_embeddings(args):
    model, meta = _load_for_inference(args)
    tcfg = TrainConfig(seed=meta.get("seed", 0))
    manifest = data.load_manifest(args.manifest)
    splits = data.split_dataset(manifest, tcfg.split_ratios, tcfg.seed)
    chosen = {"train": 0, "val": 1, "test": 2}[args.split]
    items = featurize(splits[chosen], StftConfig(), latent_seed=tcfg.seed,
                      dtype=model.dtype)
    embs, labels, uids = [], [], []
    for b in make_batches(items, tcfg.batch_size):
        planes, mask, lat, lmask, lab = collate(b, model.dtype)
        embs.append(model.fused_embeddings(planes, mask, lat, lmask))
        labels.extend(lab.tolist())
        uids.extend(u.uid for u in b)
    arrays = {"embeddings": np.concatenate(embs).astype(np.float32),
              "labels": np.array(labels, dtype=np.float32),
              "ids": np.frombuffer("\n".join(uids).encode(), dtype=np.uint8)}
    save_arrays(args.out, arrays)
    print(f"wrote {len(labels)} embeddings to {args.out}")
    return 0


# --- dispatch --------------------------------------------------------------


def build_parser():
    p = _Parser(prog="qser", description="quartet speech-emotion pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, manifest=True, out=True):
        if manifest:
            sp.add_argument("--manifest", required=True)
        if out:
            sp.add_argument("--out", required=True)
        sp.add_argument("--config", default=None)
        sp.add_argument("--seed", type=int, default=None)

    sp = sub.add_parser("synth", help="generate a synthetic corpus")
    sp.add_argument("--spec", default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("extract", help="dump quartet features")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_extract)

    sp = sub.add_parser("pretrain", help="stage-1 CPA pretraining")
    common(sp)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("train", help="stage-2 supervised training")
    common(sp)
    sp.add_argument("--checkpoint", default=None,
                    help="stage-1 checkpoint to fine-tune from")
    sp.add_argument("--no-cpa", action="store_true")
    sp.add_argument("--freeze-vocal-stage2", action="store_true")
    sp.add_argument("--zero-channel",
                    choices=["M", "rho", "finst", "taug"], default=None)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="metrics on a split")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", choices=["train", "val", "test"],
                    default="test")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("infer", help="classify one WAV file")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("wav")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("dump-embeddings",
                        help="utterance vectors to an array container")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", choices=["train", "val", "test"],
                    default="test")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_dump_embeddings)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else USAGE_ERROR
    try:
        return args.func(args)
    except (QserError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_ERROR


if __name__ == "__main__":
    sys.exit(main())
