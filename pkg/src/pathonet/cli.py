"""``pathonet`` command-line tool.

Every subcommand reads an optional ``--config`` file of ``key = value``
lines.  Values resolve as defaults < config file < ``PATHONET_*``
environment variables < flags.  Failures print one ``pathonet: ...`` line
to stderr and exit non-zero:

    1  runtime failure (bad input values, packing failure, ...)
    2  usage error (unknown flag, missing argument)
    3  malformed configuration
    4  missing input file
    5  unreadable or corrupt data file
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import formats
from .config import ConfigError, RunConfig, load_config
from .evaluate import (MatchConfig, ScoreReport, compute_prf, format_report, match_detections,
                       report_dict, rmse_scores, tune_thresholds)
from .labels import DatasetSplit, render_density_map, tile_and_split
from .model import CheckpointError, build_pathonet, load_checkpoint, predict, save_checkpoint
from .postprocess import extract_cells
from .synth import PackingError, SynthConfig, counts_for_size, generate_tile
from .training import TrainConfig, samples_from_annotations, train

log = logging.getLogger("pathonet")

EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG, EXIT_MISSING, EXIT_FORMAT = 1, 2, 3, 4, 5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# helpers

def _map(cfg: RunConfig, fn, items):
    """Apply ``fn`` over ``items`` on a pool; results keep input order."""
    items = list(items)
    if cfg.workers() == 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=cfg.workers()) as pool:
        return list(pool.map(fn, items))


def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    return path


def _require_seed(cfg: RunConfig, command: str) -> int:
    if cfg.seed is None:
        raise UsageError(f"{command} is randomized and needs an explicit --seed")
    return cfg.seed


def _inputs(path: Path, suffix: str) -> list[Path]:
    """A single file, or every ``suffix`` file of a directory (sorted)."""
    path = _require(path)
    if path.is_dir():
        found = sorted(p for p in path.iterdir() if p.suffix.lower() == suffix)
        if not found:
            raise FileNotFoundError(f"no {suffix} files in {path}")
        return found
    return [path]


def _output_for(src: Path, out: Path, many: bool, suffix: str) -> Path:
    if many:
        out.mkdir(parents=True, exist_ok=True)
        return out / (src.stem + suffix)
    return out


def _annotated_images(directory) -> list[tuple[Path, Path]]:
    pairs = []
    for img in formats.list_images(_require(directory)):
        ann = formats.annotation_path_for(img)
        if ann.exists():
            pairs.append((img, ann))
    if not pairs:
        raise FileNotFoundError(f"no annotated .png images in {directory}")
    return pairs


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--size must look like HxW, got {text!r}") from None
    return h, w


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args, cfg: RunConfig) -> None:
    seed = _require_seed(cfg, "synth")
    scfg = SynthConfig(size=args.size, counts=counts_for_size(args.size), overlap_probability=args.overlap, seed=seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tiles = _map(cfg, lambda i: generate_tile(scfg, i), range(args.count))
    for i, (image, cells) in enumerate(tiles):
        stem = out / f"synth_{i:04d}"
        formats.write_png(stem.with_suffix(".png"), image)
        formats.write_annotations(stem.with_suffix(".json"), cells)
    log.info("wrote %d tiles to %s", args.count, out)


def cmd_render_labels(args, cfg: RunConfig) -> None:
    cells = formats.read_annotations(_require(args.annotations))
    if args.image:
        size = formats.read_png(_require(args.image)).shape[:2]
    elif args.size:
        size = _parse_size(args.size)
    else:
        raise UsageError("render-labels needs --image or --size")
    formats.write_dmap(args.out, render_density_map(cells, size, cfg.render_config()))


def cmd_prepare(args, cfg: RunConfig) -> None:
    seed = _require_seed(cfg, "prepare")
    pairs = _annotated_images(args.images)
    sources = _map(cfg, lambda p: (p[0].stem, formats.read_png(p[0]), formats.read_annotations(p[1])), pairs)
    tiles = tile_and_split(sources, cfg.tile, DatasetSplit(cfg.train_fraction, seed))
    out = Path(args.out)
    for split in ("train", "test"):
        (out / split).mkdir(parents=True, exist_ok=True)
    render_cfg = cfg.render_config()

    def write(t):
        stem = out / t.split / t.name
        formats.write_png(stem.with_suffix(".png"), t.image)
        formats.write_annotations(stem.with_suffix(".json"), t.cells)
        formats.write_dmap(stem.with_suffix(".dmap"), render_density_map(t.cells, t.image.shape[:2], render_cfg))

    _map(cfg, write, tiles)
    assignment = {str(t.source): t.split for t in tiles}
    (out / "splits.json").write_text(json.dumps(assignment, indent=1, sort_keys=True) + "\n")
    n_train = sum(t.split == "train" for t in tiles)
    log.info("%d tiles from %d images: %d train, %d test", len(tiles), len(pairs), n_train, len(tiles) - n_train)


def cmd_train(args, cfg: RunConfig) -> None:
    seed = _require_seed(cfg, "train")
    pairs = _annotated_images(args.data)
    tiles = [(formats.read_png(i), formats.read_annotations(a)) for i, a in pairs]
    samples = samples_from_annotations(tiles, cfg.render_config(), cfg.augment)
    params = build_pathonet(cfg.widths, seed=seed, dilation=cfg.dilation)
    tcfg = TrainConfig(cfg.epochs, cfg.batch_size, cfg.schedule(), seed, cfg.augment, cfg.max_steps)
    log.info("training on %d samples (%d images)", len(samples), len(tiles))
    train(params, samples, tcfg)
    save_checkpoint(params, args.out)


def _density_for(model, path: Path) -> np.ndarray:
    if path.suffix.lower() == ".dmap":
        return formats.read_dmap(path)
    if model is None:
        raise UsageError("--model is required to run on images")
    return predict(model, formats.read_png(path))


def cmd_infer(args, cfg: RunConfig) -> None:
    model = load_checkpoint(_require(args.model))
    images = _inputs(args.image, ".png")
    many = Path(args.image).is_dir()
    maps = _map(cfg, lambda p: predict(model, formats.read_png(p)), images)
    for src, dmap in zip(images, maps):
        formats.write_dmap(_output_for(src, Path(args.out), many, ".dmap"), dmap)


def cmd_detect(args, cfg: RunConfig) -> None:
    if bool(args.image) == bool(args.map):
        raise UsageError("detect needs exactly one of --image or --map")
    model = load_checkpoint(_require(args.model)) if args.model else None
    src = Path(args.image or args.map)
    inputs = _inputs(src, ".png" if args.image else ".dmap")
    many = src.is_dir()
    pcfg = cfg.postprocess_config()
    found = _map(cfg, lambda p: extract_cells(_density_for(model, p), pcfg), inputs)
    for path, cells in zip(inputs, found):
        formats.write_annotations(_output_for(path, Path(args.out), many, ".json"), cells)
    log.info("%d cells in %d image(s)", sum(map(len, found)), len(inputs))


def _paired_annotations(gt: Path, pred: Path) -> list[tuple[str, Path, Path]]:
    gt, pred = _require(gt), _require(pred)
    if gt.is_dir() != pred.is_dir():
        raise UsageError("--gt and --pred must both be files or both be directories")
    if not gt.is_dir():
        return [(gt.stem, gt, pred)]
    out = []
    for g in sorted(gt.glob("*.json")):
        p = pred / g.name
        if not p.exists():
            raise FileNotFoundError(str(p))
        out.append((g.stem, g, p))
    if not out:
        raise FileNotFoundError(f"no .json annotations in {gt}")
    return out


def cmd_eval(args, cfg: RunConfig) -> None:
    mcfg = MatchConfig(cfg.radius)
    report = None
    gt_all, pred_all = [], []
    ki_p, ki_t, til_p, til_t = [], [], [], []
    for _, g, p in _paired_annotations(args.gt, args.pred):
        gt, pred = formats.read_annotations(g), formats.read_annotations(p)
        r = match_detections(gt, pred, mcfg)
        report = r if report is None else report.merge(r)
        gt_all += gt
        pred_all += pred
        sp, st = ScoreReport.from_cells(pred), ScoreReport.from_cells(gt)
        ki_p.append(sp.ki67)
        ki_t.append(st.ki67)
        til_p.append(sp.til)
        til_t.append(st.til)
    prf = compute_prf(report)
    scores = ScoreReport.from_cells(pred_all)
    rmse = {"ki67": rmse_scores(ki_p, ki_t), "til": rmse_scores(til_p, til_t)}
    print(format_report(prf, scores, rmse))
    if args.json:
        Path(args.json).write_text(json.dumps(report_dict(prf, scores, rmse), indent=1, sort_keys=True) + "\n")


def cmd_score(args, cfg: RunConfig) -> None:
    counts = formats.read_cells_or_counts(_require(args.cells))
    s = ScoreReport.from_counts(counts)
    flag_k = " (degenerate)" if s.ki67_degenerate else ""
    flag_t = " (degenerate)" if s.til_degenerate else ""
    print(f"ki67 {s.ki67:.4f} band {s.ki67_band}{flag_k}")
    print(f"til {s.til:.4f} band {s.til_band}{flag_t}")
    if args.json:
        doc = {"counts": counts, "ki67": s.ki67, "ki67_band": s.ki67_band, "til": s.til, "til_band": s.til_band}
        Path(args.json).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def cmd_tune(args, cfg: RunConfig) -> None:
    model = load_checkpoint(_require(args.model)) if args.model else None
    data = _require(args.data)
    entries = []
    for ann in sorted(data.glob("*.json")):
        dmap, png = ann.with_suffix(".dmap"), ann.with_suffix(".png")
        if model is not None and png.exists():
            entries.append((png, ann))
        elif model is None and dmap.exists():
            entries.append((dmap, ann))
    if not entries:
        kind = "annotated .png images" if model is not None else "annotated .dmap maps (or pass --model)"
        raise FileNotFoundError(f"no {kind} in {data}")
    maps = _map(cfg, lambda e: _density_for(model, e[0]), entries)
    gts = [formats.read_annotations(a) for _, a in entries]
    best = tune_thresholds(maps, gts, MatchConfig(cfg.radius),
                           min_separation=cfg.min_separation, seed_source=cfg.seed_source)
    text = ",".join(f"{t:g}" for t in best)
    print(f"thresholds = {text}")
    if args.out:
        Path(args.out).write_text(f"thresholds = {text}\n")


# ---------------------------------------------------------------------------
# argument parsing

# flag name -> RunConfig key, per subcommand
_TUNABLES = {
    "seed": ("--seed", int, "RNG seed (required for randomized steps)"),
    "threads": ("--threads", int, "worker threads (default: logical cores)"),
    "widths": ("--widths", str, "four comma-separated layer widths"),
    "variance": ("--variance", float, "label Gaussian variance in pixels^2"),
    "peak": ("--peak", float, "label Gaussian peak"),
    "center_value": ("--center-value", float, "value written at each cell center"),
    "tile": ("--tile", int, "tile side in pixels"),
    "train_fraction": ("--train-fraction", float, "fraction of source images in the train split"),
    "thresholds": ("--thresholds", str, "per-class thresholds, e.g. 120,180,40"),
    "min_separation": ("--min-separation", int, "minimum distance between seed maxima"),
    "seed_source": ("--seed-source", str, "watershed seeds from 'distance' or 'density' maxima"),
    "radius": ("--radius", float, "matching radius R in pixels"),
    "base_lr": ("--lr", float, "initial learning rate"),
    "decay_factor": ("--decay-factor", float, "learning-rate decay factor"),
    "decay_every": ("--decay-every", int, "epochs between learning-rate decays"),
    "epochs": ("--epochs", int, "training epochs"),
    "batch_size": ("--batch-size", int, "mini-batch size"),
    "augment": ("--augment", str, "use flip/rotation augmentation (true/false)"),
    "max_steps": ("--max-steps", int, "stop after this many optimizer steps"),
}

_LABEL_KEYS = ("variance", "peak", "center_value")
_POST_KEYS = ("thresholds", "min_separation", "seed_source")
_COMMANDS = {
    "synth": (cmd_synth, "generate synthetic annotated tiles", ("seed", "threads")),
    "render-labels": (cmd_render_labels, "render an annotation file to a density map", _LABEL_KEYS),
    "prepare": (cmd_prepare, "tile, split and label a directory of annotated images",
                ("seed", "threads", "tile", "train_fraction") + _LABEL_KEYS),
    "train": (cmd_train, "train a model on annotated tiles",
              ("seed", "widths", "base_lr", "decay_factor", "decay_every", "epochs", "batch_size",
               "augment", "max_steps") + _LABEL_KEYS),
    "infer": (cmd_infer, "predict density maps", ("threads",)),
    "detect": (cmd_detect, "extract cell centers from an image or a density map", ("threads",) + _POST_KEYS),
    "eval": (cmd_eval, "match predictions to ground truth and report metrics", ("radius",)),
    "score": (cmd_score, "Ki-67 and TIL scores from counts or annotations", ()),
    "tune-thresholds": (cmd_tune, "pick per-class thresholds on a validation set",
                        ("threads", "radius", "min_separation", "seed_source")),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pathonet", description="PathoNet Ki-67 cell detection pipeline")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, (_, help_text, keys) in _COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="key = value configuration file")
        for key in keys:
            flag, kind, h = _TUNABLES[key]
            p.add_argument(flag, dest=key, type=kind, default=None, help=h)
        if name == "synth":
            p.add_argument("--out", required=True, help="output directory")
            p.add_argument("--count", type=int, default=8, help="number of tiles")
            p.add_argument("--size", type=int, default=256, help="tile side in pixels")
            p.add_argument("--overlap", type=float, default=0.0, help="probability a cell overlaps a neighbour")
        elif name == "render-labels":
            p.add_argument("--annotations", required=True)
            p.add_argument("--image", help="image whose size the map takes")
            p.add_argument("--size", help="map size as HxW")
            p.add_argument("--out", required=True, help="output .dmap file")
        elif name == "prepare":
            p.add_argument("--images", required=True, help="directory of .png images with .json annotations")
            p.add_argument("--out", required=True, help="output directory")
        elif name == "train":
            p.add_argument("--data", required=True, help="directory of .png tiles with .json annotations")
            p.add_argument("--out", required=True, help="output checkpoint")
        elif name == "infer":
            p.add_argument("--model", required=True)
            p.add_argument("--image", required=True, help=".png file or directory")
            p.add_argument("--out", required=True, help=".dmap file, or directory for a directory input")
        elif name == "detect":
            p.add_argument("--model", help="checkpoint (needed with --image)")
            p.add_argument("--image", help=".png file or directory")
            p.add_argument("--map", help=".dmap file or directory")
            p.add_argument("--out", required=True, help="annotation file, or directory for a directory input")
        elif name == "eval":
            p.add_argument("--gt", required=True, help="ground-truth annotation file or directory")
            p.add_argument("--pred", required=True, help="predicted annotation file or directory")
            p.add_argument("--json", help="also write metrics as JSON")
        elif name == "score":
            p.add_argument("--cells", required=True, help="annotation list or per-class counts")
            p.add_argument("--json", help="also write scores as JSON")
        elif name == "tune-thresholds":
            p.add_argument("--model", help="checkpoint; without it, .dmap files next to the annotations are used")
            p.add_argument("--data", required=True, help="validation directory")
            p.add_argument("--out", help="write the result as a config fragment")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand (one of: " + ", ".join(_COMMANDS) + ")")
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(message)s", stream=sys.stderr, force=True)
        keys = _COMMANDS[args.command][2]
        overrides = {k: getattr(args, k) for k in keys}
        if args.config:
            _require(args.config)
        cfg = load_config(args.config, overrides=overrides)
        _COMMANDS[args.command][0](args, cfg)
    except UsageError as exc:
        return _fail(EXIT_USAGE, f"usage error: {exc}")
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, f"config error: {exc}")
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, f"missing file: {exc.filename or exc}")
    except (formats.FormatError, CheckpointError) as exc:
        return _fail(EXIT_FORMAT, f"bad data file: {exc}")
    except (ValueError, PackingError, OSError) as exc:
        return _fail(EXIT_RUNTIME, f"error: {exc}")
    return 0


def _fail(code: int, message: str) -> int:
    print("pathonet: " + " ".join(str(message).split()), file=sys.stderr)
    return code


def entry() -> None:
    sys.exit(main())

