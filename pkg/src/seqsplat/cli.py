"""``seqsplat`` command line: one subcommand per pipeline stage.

Config files are JSON with optional sections ``data``, ``model``, ``train``,
``eval`` and ``lift``. Command-line flags override file values, and every run
writes the fully resolved config to ``<out>/resolved_config.json``.
"""
from __future__ import annotations

import os
import sys

# must happen before numpy is imported anywhere
_threads = os.environ.get("SEQSPLAT_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import json  # noqa: E402
from types import SimpleNamespace  # noqa: E402

import numpy as np  # noqa: E402

SECTIONS = ("data", "model", "train", "eval", "lift")
EVAL_DEFAULTS = {"split": "val", "setting": "seq"}
LIFT_DEFAULTS = {"views": 8, "resolution": [256, 256], "background": [0.0, 0.0, 0.0]}


class CliError(Exception):
    pass


# -- config -------------------------------------------------------------------------------
def load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise CliError(f"config {path} must be a JSON object")
    return cfg


def resolve_config(raw, seed=None):
    """Validate every section and fill defaults; returns plain dicts."""
    from .datagen import GenConfig
    from .model import ModelConfig
    from .train import TrainConfig

    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise CliError(f"unknown config sections: {sorted(unknown)}")
    data = dict(raw.get("data") or {})
    manifest = data.pop("manifest", None)
    lift = _merge("lift", LIFT_DEFAULTS, raw.get("lift"))
    ev = _merge("eval", EVAL_DEFAULTS, raw.get("eval"))
    train = dict(raw.get("train") or {})
    if seed is not None:
        data["seed"] = seed
        train["seed"] = seed
    train.setdefault("lift_views", lift["views"])
    train.setdefault("lift_resolution", lift["resolution"])
    try:
        gen = GenConfig.from_dict(data)
        model = ModelConfig.from_dict(raw.get("model"))
        tc = TrainConfig.from_dict(train)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid config: {exc}") from exc
    return {"data": dict(vars(gen), manifest=manifest), "model": model.to_dict(),
            "train": tc.to_dict(), "eval": ev, "lift": lift}


def _merge(name, defaults, given):
    given = dict(given or {})
    bad = set(given) - set(defaults)
    if bad:
        raise CliError(f"unknown {name} keys: {sorted(bad)}")
    return dict(defaults, **given)


def _echo(out, cfg):
    from .autograd.checkpoint import atomic_write_bytes

    os.makedirs(out, exist_ok=True)
    atomic_write_bytes(os.path.join(out, "resolved_config.json"),
                       (json.dumps(cfg, indent=1, sort_keys=True) + "\n").encode())


def _objects(cfg):
    from .datagen import GenConfig
    from .model import ModelConfig
    from .train import TrainConfig

    data = dict(cfg["data"])
    data.pop("manifest")
    return GenConfig(**data), ModelConfig.from_dict(cfg["model"]), TrainConfig.from_dict(cfg["train"])


def _dataset(cfg):
    from .datagen import build_dataset, load_dataset

    manifest = cfg["data"]["manifest"]
    if manifest:
        if not os.path.exists(manifest):
            raise CliError(f"dataset manifest not found: {manifest}")
        return load_dataset(manifest)
    return build_dataset(_objects(cfg)[0])


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


# -- subcommands --------------------------------------------------------------------------
def cmd_gen_data(args, cfg):
    from .datagen import emit_dataset

    gen, _, _ = _objects(cfg)
    manifest = emit_dataset(gen, args.out)
    c = manifest["counts"]
    print(f"wrote {c['scenes']} scenes ({c['train']} train, {c['val']} val), "
          f"{c['sequences']} sequences to {args.out}")


def cmd_pretrain(args, cfg):
    from .train import reconstruction_miou, run_pretrain

    _, mcfg, tc = _objects(cfg)
    ds = _dataset(cfg)
    res = run_pretrain(ds, tc, out_dir=args.out, model_config=mcfg, log=_log)
    print(f"reconstruction mIoU on training masks: {reconstruction_miou(res.model, ds):.4f}")
    print(f"checkpoint: {res.checkpoint_path}")


def cmd_train(args, cfg):
    from .train import run_train

    _, mcfg, tc = _objects(cfg)
    ds = _dataset(cfg)
    if args.checkpoint and not os.path.exists(args.checkpoint):
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    res = run_train(ds, tc, init=args.checkpoint, features=args.features == "on", out_dir=args.out,
                    model_config=mcfg, cache_dir=os.path.join(args.out, "banks"), log=_log)
    print(f"checkpoint: {res.checkpoint_path}")


def cmd_eval(args, cfg):
    from .autograd.checkpoint import atomic_write_bytes
    from .metrics import evaluate
    from .scene import AffordanceMask, annotations_to_dict

    if not os.path.exists(args.checkpoint):
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    setting = args.setting or cfg["eval"]["setting"]
    split = cfg["eval"]["split"]
    ds = [s for s in _dataset(cfg) if s.split == split]
    if not ds:
        raise CliError(f"dataset has no {split!r} scenes")
    lift = cfg["lift"]
    report = evaluate(args.checkpoint, ds, setting, out_dir=args.out, lift_views=lift["views"],
                      lift_resolution=tuple(lift["resolution"]),
                      cache_dir=os.path.join(args.out, "banks"))
    pred_dir = os.path.join(args.out, f"predictions_{setting}")
    by_scene = {}
    for scene_id, ins, steps in report.predictions:
        seq = SimpleNamespace(instruction=ins,
                              steps=[(t, AffordanceMask(p)) for t, p in steps])
        by_scene.setdefault(scene_id, []).append(seq)
    sizes = {s.scene_id: s.scene.n for s in ds}
    for scene_id, seqs in by_scene.items():
        doc = annotations_to_dict(scene_id + ".ply", seqs, sizes[scene_id])
        atomic_write_bytes(os.path.join(pred_dir, scene_id + ".json"),
                           (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode())
    sys.stdout.write(report.to_tsv())


def cmd_ablate(args, cfg):
    from .train import ABLATION_HEADER, run_ablation

    _, mcfg, tc = _objects(cfg)
    rows = run_ablation(_dataset(cfg), tc, out_dir=args.out, setting=cfg["eval"]["setting"],
                        split=cfg["eval"]["split"], model_config=mcfg,
                        cache_dir=os.path.join(args.out, "banks"), log=_log)
    print("\t".join(ABLATION_HEADER))
    for r in rows:
        print("\t".join(f"{v:.4f}" if isinstance(v, float) else str(v) for v in r))


def _scene_arg(args):
    from .scene import load_scene

    if not args.scene:
        raise CliError("--scene is required")
    if not os.path.exists(args.scene):
        raise CliError(f"scene not found: {args.scene}")
    return load_scene(args.scene, raw_3dgs=args.raw_3dgs)


def cmd_render(args, cfg):
    from .raster import default_view_ring, dump_weights, render_rgb, render_weights, write_ppm

    scene = _scene_arg(args)
    lift = cfg["lift"]
    cams = default_view_ring(scene, lift["views"], tuple(lift["resolution"]))
    for v, cam in enumerate(cams):
        rec = render_weights(scene, cam)
        img = render_rgb(scene, cam, tuple(lift["background"]), records=rec)
        write_ppm(img, os.path.join(args.out, f"view_{v:02d}.ppm"))
        if args.weights:
            dump_weights(rec, os.path.join(args.out, f"view_{v:02d}.sswt"))
    print(f"rendered {len(cams)} views to {args.out}")


def cmd_lift(args, cfg):
    from .lift import lift_pipeline, save_bank

    scene = _scene_arg(args)
    lift = cfg["lift"]
    bank = lift_pipeline(scene, lift["views"], resolution=tuple(lift["resolution"]),
                         background=tuple(lift["background"]))
    path = os.path.join(args.out, "features.ssfb")
    save_bank(bank, path)
    print(f"lifted {bank.d}-dim features for {bank.n} Gaussians "
          f"({int(np.count_nonzero(bank.coverage))} covered) -> {path}")


def cmd_metrics(args, cfg):
    from .metrics import mean_scores, sequential_metrics
    from .scene import parse_step_lists

    if not args.pred or not args.gt:
        raise CliError("metrics needs --pred and --gt")
    docs = []
    for path in (args.pred, args.gt):
        try:
            with open(path) as fh:
                docs.append(json.load(fh))
        except OSError as exc:
            raise CliError(f"cannot read {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise CliError(f"{path} is not valid JSON: {exc}") from exc
    n = docs[1].get("num_gaussians")
    if n is None:
        raise CliError(f"{args.gt} lacks num_gaussians")
    if docs[0].get("num_gaussians", n) != n:
        raise CliError("prediction and ground truth disagree on the Gaussian count")
    pred = parse_step_lists(docs[0], n, allow_empty=True)
    gt = parse_step_lists(docs[1], n)
    if len(pred) != len(gt):
        raise CliError(f"{len(pred)} predicted samples for {len(gt)} ground-truth samples")
    lines = ["instruction\tsIoU\tsAUC\tsSIM\tsMAE\taligned_length"]
    scores = []
    for (ins, p), (gins, g) in zip(pred, gt):
        sc = sequential_metrics([m.scores for _, m in p], [m.scores for _, m in g])
        scores.append(sc)
        lines.append(f"{gins}\t" + "\t".join(f"{v:.6f}" for v in sc.as_tuple())
                     + f"\t{sc.aligned_length}")
    lines.append("mean\t" + "\t".join(f"{v:.6f}" for v in mean_scores(scores)) + "\t-")
    text = "\n".join(lines) + "\n"
    if args.out:
        from .autograd.checkpoint import atomic_write_bytes

        atomic_write_bytes(os.path.join(args.out, "metrics.tsv"), text.encode())
    sys.stdout.write(text)


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic scene dataset"),
    "pretrain": (cmd_pretrain, "reconstruction pre-training of the perception modules"),
    "train": (cmd_train, "end-to-end sequential training"),
    "eval": (cmd_eval, "score a checkpoint in one evaluation setting"),
    "ablate": (cmd_ablate, "2x2 pre-training x feature-injection grid"),
    "render": (cmd_render, "render the default view ring of a PLY scene"),
    "lift": (cmd_lift, "lift procedural 2D features onto a PLY scene"),
    "metrics": (cmd_metrics, "score a prediction dump against annotations"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="seqsplat", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text,
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--out", required=name != "metrics", default=None,
                       help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="overrides data.seed and train.seed")
        if name in ("train", "eval"):
            p.add_argument("--checkpoint", required=name == "eval", default=None,
                           help="pre-training checkpoint (train) or trained model (eval)")
        if name == "train":
            p.add_argument("--features", choices=("on", "off"), default="off",
                           help="inject lifted semantic features")
        if name == "eval":
            p.add_argument("--setting", required=True, choices=("single", "seq_gt", "seq"),
                           help="evaluation setting")
        if name in ("render", "lift"):
            p.add_argument("--scene", default=None, help="PLY scene file")
            p.add_argument("--raw-3dgs", action="store_true",
                           help="PLY stores logit opacity and log scale (trained 3DGS output)")
        if name == "render":
            p.add_argument("--weights", action="store_true", help="also dump blend weights")
        if name == "metrics":
            p.add_argument("--pred", default=None, help="prediction dump (annotation schema)")
            p.add_argument("--gt", default=None, help="ground-truth annotation file")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(load_config(args.config), seed=args.seed)
        if args.out:
            _echo(args.out, cfg)
        COMMANDS[args.command][0](args, cfg)
    except CliError as exc:
        print(f"seqsplat {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"seqsplat {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
