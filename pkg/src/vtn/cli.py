"""Command-line entry point: ``vtn {infer,eval,train,distill,bench,params,synth}``.

Exit codes: 0 success, 2 usage/config error, 3 data integrity error.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import cost
from .bench import bench
from .decoder import DecoderConfig, DecoderWeights, classify_clip, init_weights
from .errors import ConfigError, DomainError, LoadError, ShapeError, BoundsError
from .frontend import video_clips
from .modelio import load_dataset, load_embeddings, load_model, save_dataset, save_model
from .synthetic import separable_dataset, two_modality_task
from .training import (LabeledDataset, load_run_config, teacher_predictions, train,
                       write_history_csv)
from .tensor import stable_softmax

log = logging.getLogger("vtn")

EXIT_USAGE = 2
EXIT_DATA = 3


class UsageError(Exception):
    pass


def _load_model(path) -> DecoderWeights:
    return load_model(path, dtype=np.float32)[0]


def video_prediction(w: DecoderWeights, frames: np.ndarray, stride: int = 2,
                     max_segments: int | None = None, aggregate: str = "probs"):
    """Per-segment clip probabilities and the aggregated video distribution."""
    clips = video_clips(frames, w.config.seq_len, stride)
    if max_segments is not None:
        clips = clips[:max_segments]
    if not clips:
        raise UsageError(f"video has {len(frames)} frames, fewer than one "
                         f"{w.config.seq_len * stride}-frame segment")
    frame_logits, probs = classify_clip(np.stack(clips), w)
    if aggregate == "probs":
        video = probs.mean(axis=0)
    else:
        video = stable_softmax(frame_logits.mean(axis=-2).mean(axis=0))
    return probs, video


def cmd_infer(args):
    w = _load_model(args.model)
    table = load_embeddings(args.embeddings, expected_dim=w.config.input_dim)
    limit = None if args.segments == "all" else int(args.segments)
    seg_probs, video = video_prediction(w, table.embeddings, args.stride, limit, args.aggregate)
    for i, p in enumerate(seg_probs):
        k = int(np.argmax(p))
        print(f"{i},{k},{p[k]:.6f}")
    k = int(np.argmax(video))
    print(f"video,{k},{video[k]:.6f}")


def cmd_eval(args):
    w = _load_model(args.model)
    videos = load_dataset(args.dataset, expected_dim=w.config.input_dim, dtype=np.float32)
    if not videos:
        raise UsageError("dataset holds no videos")
    correct = 0
    for i, (frames, label) in enumerate(videos):
        if label < 0:
            raise UsageError(f"video {i} is unlabeled")
        _, video = video_prediction(w, frames, args.stride, aggregate=args.aggregate)
        k = int(np.argmax(video))
        correct += k == label
        if args.per_video:
            print(f"{i},{label},{k},{video[k]:.6f}")
    print(f"{correct / len(videos):.4f}")


def _clip_dataset(path, clip_len: int, stride: int) -> LabeledDataset:
    videos = load_dataset(path)
    clips, labels = [], []
    for frames, label in videos:
        for c in video_clips(frames, clip_len, stride):
            clips.append(c)
            labels.append(label)
    if not clips:
        raise UsageError(f"{path}: no full segments to train on")
    return LabeledDataset(np.stack(clips), np.array(labels))


def _train_common(args, teachers=None):
    tcfg, overrides = load_run_config(args.config)
    seq_len = overrides.get("seq_len", 16)
    train_set = _clip_dataset(args.dataset, seq_len, tcfg.stride)
    val_set = _clip_dataset(args.val, seq_len, tcfg.stride) if args.val else None
    overrides.setdefault("input_dim", train_set.width)
    overrides.setdefault("d_model", train_set.width)
    overrides.setdefault("num_classes", int(train_set.labels.max()) + 1)
    overrides.setdefault("num_heads", 8 if overrides["d_model"] % 8 == 0 else 1)
    overrides["seq_len"] = seq_len
    mcfg = DecoderConfig(**overrides)
    tp = None
    if teachers:
        tp = teacher_predictions(teachers, train_set.clips, mode=args.fusion)
    w, history = train(train_set, mcfg, tcfg, val_set=val_set, teacher_probs=tp)
    save_model(w, args.out)
    if args.history:
        write_history_csv(history, args.history)
    last = history[-1] if history else None
    if last:
        print(f"epochs {last['epoch']} train_loss {last['train_loss']:.6f} "
              f"val_loss {last['val_loss']:.6f} val_acc {last['val_acc']:.4f} lr {last['lr']:.1e}")


def cmd_train(args):
    _train_common(args)


def cmd_distill(args):
    if not args.teacher:
        raise UsageError("distill needs at least one --teacher model")
    if len(args.teacher) > 2:
        raise UsageError("distill takes one or two teachers")
    _train_common(args, [_load_model(p) for p in args.teacher])


def cmd_bench(args):
    if args.model:
        w = _load_model(args.model)
    else:
        w = init_weights(DecoderConfig(), seed=0, dtype=np.float32)
    report = bench(w, repeats=args.repeats, warmup=args.warmup, threads=args.threads)
    print("\n".join(report.lines()))


def _params_config(args) -> DecoderConfig:
    fields = {}
    if args.config:
        fields.update(load_run_config(args.config)[1])
    for name in ("d_model", "num_heads", "d_k", "d_v", "d_ff", "num_blocks", "seq_len",
                 "num_classes", "input_dim"):
        v = getattr(args, name)
        if v is not None:
            fields[name] = v
    return DecoderConfig(**fields)


def cmd_params(args):
    cfg = _params_config(args)
    p, m = cost.count_params(cfg), cost.count_macs(cfg)
    print("component,params,macs")
    for name in p.components:
        print(f"{name},{p[name]},{m.components.get(name, 0)}")
    for name in m.components:
        if name not in p.components:
            print(f"{name},0,{m[name]}")
    print(f"decoder_total,{p.total},{m.total}")
    r = cost.reconcile(cfg, args.encoder_params, args.encoder_macs)
    if args.encoder_params or args.encoder_macs:
        print(f"encoder,{int(args.encoder_params)},{int(args.encoder_macs)}")
        print(f"total,{int(r['total_params'])},{int(r['total_macs'])}")
        print(f"total params {r['total_params'] / 1e6:.2f}M vs published "
              f"{cost.PUBLISHED_TOTAL_PARAMS / 1e6:.1f}M (rel. diff {r['params_rel_err']:.2%})")
        print(f"total GMAC {r['total_macs'] / 1e9:.3f} vs published "
              f"{cost.PUBLISHED_TOTAL_GMAC} (rel. diff {r['gmac_rel_err']:.2%})")


def cmd_synth(args):
    """Write synthetic per-frame video datasets (each clip frame repeated ``stride`` times)."""
    if args.kind == "separable":
        ds = separable_dataset(args.videos, args.dim, args.seq_len, seed=args.seed)
        sets = {"": ds}
    else:
        task = two_modality_task(n_train=args.videos, d=args.dim, t=args.seq_len, seed=args.seed,
                                 noise=1.5)
        sets = {"": task.train, ".val": task.val,
                ".a": task.modality(task.train, "a"), ".a.val": task.modality(task.val, "a"),
                ".b": task.modality(task.train, "b"), ".b.val": task.modality(task.val, "b")}
    for suffix, ds in sets.items():
        videos = [(np.repeat(c, args.stride, axis=0), int(l)) for c, l in zip(ds.clips, ds.labels)]
        path = args.out + suffix
        save_dataset(videos, path)
        print(f"wrote {len(videos)} videos to {path}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vtn", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("infer", help="classify one video's frame embeddings")
    p.add_argument("--model", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--segments", default="all", help="'all' or the number of leading segments")
    p.add_argument("--stride", type=int, default=2)
    p.add_argument("--aggregate", choices=("probs", "logits"), default="probs")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="Video@1 accuracy on a labeled dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--stride", type=int, default=2)
    p.add_argument("--aggregate", choices=("probs", "logits"), default="probs")
    p.add_argument("--per-video", action="store_true",
                   help="also print index,label,top1_class,top1_prob per video")
    p.set_defaults(func=cmd_eval)

    for name, fn in (("train", cmd_train), ("distill", cmd_distill)):
        p = sub.add_parser(name, help=f"{name} a decoder from a key=value run config")
        p.add_argument("--config", required=True)
        p.add_argument("--dataset", required=True)
        p.add_argument("--val")
        p.add_argument("--out", required=True)
        p.add_argument("--history", help="write per-epoch CSV here")
        if name == "distill":
            p.add_argument("--teacher", action="append", default=[])
            p.add_argument("--fusion", choices=("probs", "logits"), default="probs")
        p.set_defaults(func=fn)

    p = sub.add_parser("bench", help="time float32 decoder forwards")
    p.add_argument("--model", help="model file (default: random weights, default config)")
    p.add_argument("--repeats", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("params", help="parameter / MAC table")
    p.add_argument("--config", help="key=value file; model.* keys are used")
    for name in ("d_model", "num_heads", "d_k", "d_v", "d_ff", "num_blocks", "seq_len",
                 "num_classes", "input_dim"):
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=int)
    p.add_argument("--encoder-params", type=float, default=0.0)
    p.add_argument("--encoder-macs", type=float, default=0.0)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("synth", help="write a synthetic labeled dataset")
    p.add_argument("--kind", choices=("separable", "two-modality"), default="separable")
    p.add_argument("--videos", type=int, default=200)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--seq-len", type=int, default=16)
    p.add_argument("--stride", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except LoadError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (UsageError, ConfigError, DomainError, ShapeError, BoundsError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
