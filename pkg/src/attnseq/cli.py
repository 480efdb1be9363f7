"""Command-line entry point.

Subcommands: gen-data, train, eval, gradcheck, visualize. Every run is
reproducible end to end from (seed, config): rerunning a command with the
same inputs produces byte-identical outputs.

Configuration merges three layers, later wins: built-in desk-scale
defaults, a `key=value` config file (`--config`), then command-line flags.
Exit codes: 0 success, 1 runtime or numeric failure, 2 usage errors.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, fields

import numpy as np

from . import datasynth, viz
from .autodiff import Tensor, dtype_for
from .errors import ContractError, Error, FormatError
from .features import ExtractorConfig, TinyConvExtractor
from .gradcheck import finite_diff_check
from .model import Model, ModelConfig
from .seeding import MODEL_INIT, derive_rng
from .training import (TrainConfig, batch_inputs, evaluate, load_checkpoint,
                       run_training, save_checkpoint, write_metrics)


class UsageError(Exception):
    """Bad invocation; maps to exit code 2."""


@dataclass
class RunConfig:
    """Merged view of every knob the commands need; desk-scale defaults."""

    seed: int = 7
    mode: str = "vector"
    precision: str = "standard"
    out: str = "out"
    manifest: str | None = None
    checkpoint: str | None = None
    # model
    frames: int = 16
    feature_dim: int = 32
    encoder_hidden: int = 48
    attention_hidden: int = 48
    decoder_hidden: int = 24
    depth: int = 2
    dropout: float = 0.2
    attention: bool = True
    reverse: bool = True
    repr_phase: bool = True
    final_activation: str = "softmax"
    attention_activation: str = "sigmoid"
    # training
    epochs1: int = 30
    epochs2: int = 15
    batch: int = 8
    lr: float = 3e-3
    grad_clip: float = 0.0
    # dataset
    noise: float = 0.5
    train_per_class: int = 8
    test_per_class: int = 2
    clips_per_episode: int = 4
    image_size: int = 48
    conv_widths: str = "6,12"
    table_seed: int = 0
    # visualize
    limit: int = 0


_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def parse_config_file(path) -> dict:
    """Flat key=value lines; blank lines and # comments ignored."""
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, val = (part.strip() for part in line.split("=", 1))
            values[key] = val
    return values


def _coerce(name: str, kind, raw: str):
    if kind is bool or kind == "bool":
        low = raw.lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise UsageError(f"config key {name}: not a boolean: {raw!r}")
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise UsageError(f"config key {name}: bad value {raw!r}") from None
    return raw


def build_run_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    types = {f.name: (f.type if isinstance(f.type, type) else
                      {"int": int, "float": float, "str": str, "bool": bool,
                       "int | None": int, "str | None": str}.get(f.type, str))
             for f in fields(RunConfig)}
    if getattr(args, "config", None):
        if not os.path.exists(args.config):
            raise UsageError(f"config file not found: {args.config}")
        for key, raw in parse_config_file(args.config).items():
            k = key.replace("-", "_")
            if k not in types:
                raise UsageError(f"unknown config key {key!r}")
            setattr(cfg, k, _coerce(key, types[k], raw))
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            setattr(cfg, f.name, v)
    # store_true ablation flags arrive inverted
    if getattr(args, "no_attention", False):
        cfg.attention = False
    if getattr(args, "no_reverse", False):
        cfg.reverse = False
    if getattr(args, "no_repr", False):
        cfg.repr_phase = False
    if cfg.mode not in ("vector", "image"):
        raise UsageError(f"mode must be vector or image, got {cfg.mode!r}")
    return cfg


def _conv_widths(cfg: RunConfig) -> tuple:
    try:
        widths = tuple(int(x) for x in str(cfg.conv_widths).split(",") if x.strip())
    except ValueError:
        raise UsageError(f"bad conv_widths {cfg.conv_widths!r}") from None
    if not widths:
        raise UsageError("conv_widths must name at least one stage")
    return widths


def _synth_config(cfg: RunConfig) -> datasynth.SynthConfig:
    return datasynth.SynthConfig(
        num_frames=cfg.frames, feature_dim=cfg.feature_dim, image_size=cfg.image_size,
        train_per_class=cfg.train_per_class, test_per_class=cfg.test_per_class,
        clips_per_episode=cfg.clips_per_episode, table_seed=cfg.table_seed)


def _model_config(cfg: RunConfig, num_frames: int, feature_dim: int) -> ModelConfig:
    return ModelConfig(
        feature_dim=feature_dim, encoder_hidden=cfg.encoder_hidden,
        attention_hidden=cfg.attention_hidden, decoder_hidden=cfg.decoder_hidden,
        depth=cfg.depth, num_frames=num_frames, class_count=48,
        attribute_arities=(4, 8, 8, 4), dropout_rate=cfg.dropout,
        attention_enabled=cfg.attention, reverse_enabled=cfg.reverse,
        final_activation=cfg.final_activation,
        attention_activation=cfg.attention_activation, precision=cfg.precision)


def _train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        epochs_phase1=cfg.epochs1, epochs_phase2=cfg.epochs2, batch_size=cfg.batch,
        seed=cfg.seed, lr=cfg.lr, grad_clip=cfg.grad_clip or None,
        attention_enabled=cfg.attention, reverse_enabled=cfg.reverse,
        representation_phase_enabled=cfg.repr_phase, precision=cfg.precision)


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(cfg: RunConfig) -> int:
    train, test = datasynth.generate_dataset(_synth_config(cfg), cfg.mode, cfg.seed, cfg.noise)
    os.makedirs(cfg.out, exist_ok=True)
    manifest = datasynth.write_dataset(train, test, cfg.out)
    print(f"wrote {len(train)} train + {len(test)} test clips")
    print(manifest)
    return 0


def _require_manifest(cfg: RunConfig) -> str:
    if not cfg.manifest:
        raise UsageError("--manifest is required")
    if not os.path.exists(cfg.manifest):
        raise FormatError(f"manifest not found: {cfg.manifest}")
    return cfg.manifest


def cmd_train(cfg: RunConfig) -> int:
    samples = datasynth.load_dataset(_require_manifest(cfg), split="train")
    if not samples:
        raise UsageError("manifest has no train split")
    first = samples[0]
    extractor = None
    if first.features is not None:
        num_frames, feature_dim = first.features.num_frames, first.features.feature_dim
    else:
        num_frames, feature_dim = first.frames.frame_count, cfg.feature_dim
        ext_cfg = ExtractorConfig(output_dim=feature_dim, stage_widths=_conv_widths(cfg))
        extractor = TinyConvExtractor(ext_cfg, derive_rng(cfg.seed, MODEL_INIT, 1),
                                      dtype_for(cfg.precision))
    model = Model(_model_config(cfg, num_frames, feature_dim), seed=cfg.seed, extractor=extractor)
    state = run_training(model, samples, _train_config(cfg))
    os.makedirs(cfg.out, exist_ok=True)
    ckpt = os.path.join(cfg.out, "checkpoint.astc")
    metrics = os.path.join(cfg.out, "metrics.txt")
    save_checkpoint(model, state, ckpt)
    write_metrics(state.history, metrics)
    print(ckpt)
    print(metrics)
    return 0


def cmd_eval(cfg: RunConfig, split: str) -> int:
    if not cfg.checkpoint:
        raise UsageError("--checkpoint is required")
    model, _ = load_checkpoint(cfg.checkpoint)
    samples = datasynth.load_dataset(_require_manifest(cfg), split=split)
    if not samples:
        raise UsageError(f"manifest has no {split} split")
    if samples[0].features is not None:
        n, m = samples[0].features.num_frames, samples[0].features.feature_dim
        if model.extractor is not None:
            raise FormatError("image-mode checkpoint cannot score feature-file clips")
    else:
        if model.extractor is None:
            raise FormatError("vector-mode checkpoint cannot score image clips")
        n, m = samples[0].frames.frame_count, model.cfg.feature_dim
    if (n, m) != (model.cfg.num_frames, model.cfg.feature_dim):
        raise FormatError(f"dataset shape N={n}, m={m} does not match checkpoint "
                          f"N={model.cfg.num_frames}, m={model.cfg.feature_dim}")
    report = evaluate(model, samples, attributes=True)
    print(f"samples {len(samples)}")
    print(f"accuracy {report.accuracy:.4f}")
    names = ("takeoff", "somersault", "twist", "flight")
    for name, acc in zip(names, report.attribute_accuracy):
        print(f"attr_{name} {acc:.4f}")
    worst = np.argsort(report.per_class)[:3]
    print("hardest_classes " + " ".join(f"{k}:{report.per_class[k]:.2f}" for k in worst))
    off = report.confusion.copy()
    np.fill_diagonal(off, 0)
    pairs = np.argwhere(off == off.max()) if off.max() > 0 else []
    if len(pairs):
        t, p = pairs[0]
        print(f"top_confusion true={t} pred={p} count={off[t, p]}")
    return 0


TINY = dict(feature_dim=8, hidden=8, depth=2, frames=5, classes=4, arities=(2, 2, 2, 2))


def tiny_gradcheck_model(seed: int = 0) -> tuple[Model, list, tuple]:
    """Small high-precision model plus one fixed input clip and labels."""
    mc = ModelConfig(feature_dim=TINY["feature_dim"], encoder_hidden=TINY["hidden"],
                     attention_hidden=TINY["hidden"], decoder_hidden=TINY["hidden"],
                     depth=TINY["depth"], num_frames=TINY["frames"],
                     class_count=TINY["classes"], attribute_arities=TINY["arities"],
                     dropout_rate=0.2, precision="high")
    model = Model(mc, seed=seed)
    rng = derive_rng(seed, MODEL_INIT, 99)
    steps = [Tensor(rng.standard_normal(TINY["feature_dim"])) for _ in range(TINY["frames"])]
    labels = (1, (1, 0, 1, 0))
    return model, steps, labels


def gradcheck_loss(model: Model, steps, labels):
    """Combined repr+class loss in eval mode, so every parameter gets gradient."""
    from .autodiff import add
    l1, _, _ = model.forward_full(steps, labels, "repr", training=False)
    l2, _, _ = model.forward_full(steps, labels, "class", training=False)
    return add(l1, l2)


def cmd_gradcheck(cfg: RunConfig, inject_fault: bool, max_elements: int | None,
                  tolerance: float) -> int:
    model, steps, labels = tiny_gradcheck_model(cfg.seed)
    params = model.parameters()
    corrupt = params[0].name if inject_fault else None
    results = finite_diff_check(lambda: gradcheck_loss(model, steps, labels), params,
                                step=1e-5, tolerance=tolerance,
                                max_elements=max_elements, seed=cfg.seed, corrupt=corrupt)
    ok = True
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} "
              f"checked={r.checked} max_rel_err={r.max_rel_err:.3e}")
        ok = ok and r.passed
    print(f"{'all gradients verified' if ok else 'GRADIENT CHECK FAILED'} "
          f"({len(results)} parameter groups, tolerance {tolerance:g})")
    return 0 if ok else 1


def cmd_visualize(cfg: RunConfig) -> int:
    if not cfg.checkpoint:
        raise UsageError("--checkpoint is required")
    model, _ = load_checkpoint(cfg.checkpoint)
    if model.extractor is None:
        raise UsageError("checkpoint was trained on feature files; spatial maps "
                         "are unavailable, train in image mode to visualize")
    if model.attention is None:
        raise UsageError("checkpoint has no attention network to visualize")
    samples = datasynth.load_dataset(_require_manifest(cfg), split="test")
    if not samples:
        raise UsageError("manifest has no test split")
    if samples[0].frames is None:
        raise UsageError("manifest clips are feature files; visualization needs image clips")
    if cfg.limit:
        samples = samples[:cfg.limit]
    outdir = os.path.join(cfg.out, "maps")
    os.makedirs(outdir, exist_ok=True)
    count = 0
    for sample in samples:
        seq = model.extractor.extract(sample.frames, keep_maps=True)
        steps = [Tensor(v.astype(model.dtype)) for v in seq.vectors]
        context = model.encode(steps)
        att = model.attend(steps, context, training=False)
        h, w = sample.frames.frame_size
        for t, frame_idx in enumerate(att.frame_order):
            amap = viz.attention_map(att.a[t].data, seq.spatial_maps[frame_idx])
            overlay = viz.upsample(amap, h, w)
            stem = os.path.join(outdir, f"{sample.clip_id}_f{frame_idx:03d}")
            viz.export_pgm(overlay, stem + ".pgm")
            viz.export_ppm(viz.side_by_side(sample.frames.frames[frame_idx], overlay),
                           stem + "_strip.ppm")
            count += 1
    print(f"wrote {count} attention maps under {outdir}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing

def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--precision", choices=("standard", "high"))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="attnseq",
                                 description="attention-guided LSTM sequence classifier")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic dataset")
    _add_common(g)
    g.add_argument("--mode", choices=("vector", "image"))
    g.add_argument("--noise", type=float)
    g.add_argument("--frames", type=int)
    g.add_argument("--feature-dim", dest="feature_dim", type=int)
    g.add_argument("--image-size", dest="image_size", type=int)
    g.add_argument("--train-per-class", dest="train_per_class", type=int)
    g.add_argument("--test-per-class", dest="test_per_class", type=int)
    g.add_argument("--table-seed", dest="table_seed", type=int)

    t = sub.add_parser("train", help="run the two-phase training procedure")
    _add_common(t)
    t.add_argument("--manifest")
    t.add_argument("--epochs1", type=int)
    t.add_argument("--epochs2", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--frames", type=int)
    t.add_argument("--feature-dim", dest="feature_dim", type=int)
    t.add_argument("--conv-widths", dest="conv_widths")
    t.add_argument("--no-attention", action="store_true")
    t.add_argument("--no-reverse", action="store_true")
    t.add_argument("--no-repr", action="store_true")

    e = sub.add_parser("eval", help="score a checkpoint against a manifest split")
    _add_common(e)
    e.add_argument("--manifest")
    e.add_argument("--checkpoint")
    e.add_argument("--split", choices=("train", "test"), default="test")

    c = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    _add_common(c)
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.add_argument("--max-elements", dest="max_elements", type=int)
    c.add_argument("--inject-fault", action="store_true",
                   help="corrupt one gradient to prove the check can fail")

    v = sub.add_parser("visualize", help="export attention maps for test clips")
    _add_common(v)
    v.add_argument("--manifest")
    v.add_argument("--checkpoint")
    v.add_argument("--limit", type=int)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = build_run_config(args)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.split)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, args.inject_fault, args.max_elements, args.tolerance)
        if args.command == "visualize":
            return cmd_visualize(cfg)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (Error, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
