"""Command-line interface: ``cdflow <subcommand> ...``.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .color import FORMULAE, image_cd_mean
from .evaluation import DISTORTIONS, EvalReport, evaluate
from .exceptions import CDFlowError, DimensionError
from .flow import FlowConfig, FlowModel, flow_forward
from .io import center_crop, export_cd_maps, load_image, parse_manifest, save_image, write_manifest
from .metric import compare, scale_distances
from .training import LabeledPair, TrainConfig, _stack_slice, gen_synthetic_dataset, train

logger = logging.getLogger("cdflow")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: error: {message}")


def _size(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    try:
        vals = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid size {text!r}") from None
    if len(vals) == 1:
        return vals[0], vals[0]
    if len(vals) == 2:
        return vals
    raise argparse.ArgumentTypeError(f"invalid size {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cdflow", description="Learned colour-difference metric for photographic images.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add_crop(sp):
        sp.add_argument("--center-crop", action="store_true", help="crop images to the nearest multiple of 2^K instead of failing")

    def add_report(sp):
        sp.add_argument("--report", type=Path, help="write name=value report to this file")

    t = sub.add_parser("train", help="train a model on a pair manifest")
    t.add_argument("--manifest", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True, help="checkpoint path")
    t.add_argument("--scales", type=int, default=3)
    t.add_argument("--steps", type=int, default=2)
    t.add_argument("--hidden", type=int, default=32)
    t.add_argument("--clamp", type=float, default=2.0)
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--batch-size", type=int, default=4)
    t.add_argument("--lr", type=float, default=5e-4)
    t.add_argument("--lr-decay", type=float, default=2.0)
    t.add_argument("--decay-every", type=int, default=10)
    t.add_argument("--lam", type=float, default=1e-4)
    t.add_argument("--p", type=int, choices=(1, 2), default=2)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--no-dequantize", action="store_true")
    t.add_argument("--log", type=Path, help="per-batch loss log (CSV)")
    add_crop(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--manifest", type=Path, required=True)
    add_report(e)
    add_crop(e)

    c = sub.add_parser("compare", help="colour difference between two images")
    c.add_argument("--checkpoint", type=Path, required=True)
    c.add_argument("image_a", type=Path)
    c.add_argument("image_b", type=Path)
    c.add_argument("--maps-dir", type=Path, help="write per-scale CD maps here")
    c.add_argument("--warm", action="store_true", help="also write false-colour maps")
    add_crop(c)

    d = sub.add_parser("distort-eval", help="evaluate under a random geometric distortion of the second image")
    d.add_argument("--checkpoint", type=Path, required=True)
    d.add_argument("--manifest", type=Path, required=True)
    d.add_argument("--kind", choices=DISTORTIONS, required=True)
    d.add_argument("--seed", type=int, default=0)
    add_report(d)
    add_crop(d)

    g = sub.add_parser("gen-synth", help="write a synthetic labelled pair set")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--size", type=_size, default=(32, 32), help="HxW or a single side length")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out-dir", type=Path, required=True)

    b = sub.add_parser("baseline", help="evaluate a pixel-mean CIELAB formula on a manifest")
    b.add_argument("--formula", choices=FORMULAE, required=True)
    b.add_argument("--manifest", type=Path, required=True)
    b.add_argument("--distortion", choices=DISTORTIONS)
    b.add_argument("--seed", type=int, default=0)
    add_report(b)
    return p


def _prepare(img: np.ndarray, multiple: int, crop: bool, path) -> np.ndarray:
    h, w = img.shape[:2]
    if h % multiple == 0 and w % multiple == 0:
        return img
    if not crop:
        raise DimensionError(f"{path}: size {h}×{w} is not divisible by {multiple}; pass --center-crop to crop")
    out = center_crop(img, multiple)
    logger.warning("center-cropped %s from %dx%d to %dx%d", path, h, w, *out.shape[:2])
    return out


def _load_pairs(manifest: Path, multiple: int = 1, crop: bool = False) -> list[LabeledPair]:
    pairs = []
    for row in parse_manifest(manifest):
        a = _prepare(load_image(row.path_a), multiple, crop, row.path_a)
        b = _prepare(load_image(row.path_b), multiple, crop, row.path_b)
        if a.shape != b.shape:
            raise DimensionError(f"{manifest}:{row.line}: image sizes differ ({a.shape[:2]} vs {b.shape[:2]})")
        pairs.append(LabeledPair(a, b, row.delta_v))
    return pairs


def _model_metric(model: FlowModel):
    def batch_metric(A, B):
        out = []
        with ad.no_grad():
            for lo in range(0, len(A), 64):
                a, b = A[lo : lo + 64], B[lo : lo + 64]
                n = len(a)
                stack = flow_forward(np.concatenate([a, b]), model)
                out.append(scale_distances(_stack_slice(stack, 0, n), _stack_slice(stack, n, 2 * n))[0].data)
        return np.concatenate(out)

    return batch_metric


def _emit(rep: EvalReport, title: str, path: Path | None) -> None:
    print(rep.to_table(title), end="")
    if path is not None:
        path.write_text(rep.to_kv())


def _cmd_train(args) -> int:
    multiple = 2**args.scales
    pairs = _load_pairs(args.manifest, multiple, args.center_crop)
    if not pairs:
        raise CDFlowError(f"{args.manifest}: no pairs")
    size = pairs[0].image_a.shape[:2]
    cfg = FlowConfig(args.scales, args.steps, args.hidden, args.clamp, size)
    tc = TrainConfig(
        batch_size=args.batch_size,
        lr_init=args.lr,
        lr_decay_factor=args.lr_decay,
        decay_every_epochs=args.decay_every,
        epochs=args.epochs,
        lam=args.lam,
        p=args.p,
        seed=args.seed,
        dequantize=not args.no_dequantize,
    )
    model = FlowModel(cfg, seed=args.seed)
    result = train(pairs, tc, model, checkpoint_path=args.out, log_path=args.log)
    save_checkpoint(result.model, args.out)
    means = result.epoch_means()
    if means:
        print(f"epochs={len(means)} loss_ms first={means[0]:.6f} last={means[-1]:.6f}")
    print(f"checkpoint={args.out}")
    return 0


def _cmd_eval(args, kind: str | None = None) -> int:
    model = load_checkpoint(args.checkpoint)
    pairs = _load_pairs(args.manifest, 2**model.config.n_scales, args.center_crop)
    rep = evaluate(None, pairs, distortion=kind, seed=getattr(args, "seed", 0), batch_metric=_model_metric(model))
    _emit(rep, f"CD-Flow ({kind})" if kind else "CD-Flow", args.report)
    return 0


def _cmd_compare(args) -> int:
    model = load_checkpoint(args.checkpoint)
    multiple = 2**model.config.n_scales
    a = _prepare(load_image(args.image_a), multiple, args.center_crop, args.image_a)
    b = _prepare(load_image(args.image_b), multiple, args.center_crop, args.image_b)
    res = compare(a, b, model)
    print(f"delta_e={res.delta_e:.6f}")
    for k, v in enumerate(res.per_scale, start=1):
        print(f"delta_e_{k}={v:.6f}")
    if args.maps_dir is not None:
        for path in export_cd_maps(res, args.maps_dir, warm=args.warm):
            print(f"wrote {path}")
    return 0


def _cmd_gen_synth(args) -> int:
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    pairs = gen_synthetic_dataset(args.n, args.size, args.seed)
    rows = []
    for i, pair in enumerate(pairs):
        na, nb = f"pair{i:05d}_a.png", f"pair{i:05d}_b.png"
        save_image(pair.image_a, out / na)
        save_image(pair.image_b, out / nb)
        rows.append((na, nb, pair.delta_v))
    write_manifest(rows, out / "manifest.csv")
    print(f"wrote {len(rows)} pairs to {out / 'manifest.csv'}")
    return 0


def _cmd_baseline(args) -> int:
    pairs = _load_pairs(args.manifest)
    formula = args.formula
    rep = evaluate(lambda a, b: image_cd_mean(a, b, formula), pairs, distortion=args.distortion, seed=args.seed)
    title = f"pixel-mean {formula}" + (f" ({args.distortion})" if args.distortion else "")
    _emit(rep, title, args.report)
    return 0


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handlers = {
        "train": _cmd_train,
        "eval": _cmd_eval,
        "compare": _cmd_compare,
        "distort-eval": lambda a: _cmd_eval(a, a.kind),
        "gen-synth": _cmd_gen_synth,
        "baseline": _cmd_baseline,
    }
    try:
        return handlers[args.command](args)
    except (CDFlowError, OSError, ValueError) as exc:
        print(f"cdflow {args.command}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
