"""Command-line entry point: ``regionseg <subcommand>``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
from PIL import Image

from .corpus import Sample, import_coco, import_reasonseg, load_corpus, write_manifest
from .errors import RegionSegError
from .geometry import GridSpec, normalize_image
from .pipeline import (
    RunConfig,
    Runner,
    ablation_table,
    render_markdown,
    run_ablation,
    run_eval,
)
from .synthetic import SyntheticSpec, make_synthetic_corpus
from .visual_prompt import encode_png, render_grid_prompt, render_split_prompts

log = logging.getLogger("regionseg")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration; flags override it")
    p.add_argument("--density", type=int, help="square grid density (sets rows and cols)")
    p.add_argument("--rows", type=int)
    p.add_argument("--cols", type=int)
    p.add_argument("--padding", type=float, dest="padding_ratio")
    p.add_argument("--prompt-variant", choices=["A", "B"])
    p.add_argument("--visual-style", choices=["split", "grid", "none"])
    p.add_argument("--temperature", type=float)
    p.add_argument("--parallelism", type=int)
    p.add_argument("--output-dir")
    p.add_argument("--mllm-scripted", metavar="DIR", help="directory of {sample_id}.txt responses")
    p.add_argument("--mllm-url", help="base URL of a vision chat-completions API")
    p.add_argument("--mllm-model")
    p.add_argument("--api-key-env", default=None, help="environment variable holding the API key")
    p.add_argument("--seg", choices=["oracle", "full", "remote"])
    p.add_argument("--seg-url")
    p.add_argument("--fail-fast", action="store_true", default=None)
    p.add_argument("--map", action="store_true", default=None, dest="compute_map")
    p.add_argument("--overlays", action="store_true", default=None)


def build_config(args: argparse.Namespace) -> RunConfig:
    data: Dict[str, Any] = {}
    base = Path(".")
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            data = json.load(fh)
        base = Path(args.config).parent
    grid = dict(data.pop("grid", {}) or {})
    if "density" in data:
        d = int(data.pop("density"))
        grid.update(rows=d, cols=d)
    if args.density:
        grid.update(rows=args.density, cols=args.density)
    for key in ("rows", "cols", "padding_ratio"):
        if getattr(args, key, None) is not None:
            grid[key] = getattr(args, key)
    data["grid"] = grid
    for key in ("prompt_variant", "visual_style", "temperature", "parallelism", "output_dir",
                "fail_fast", "compute_map", "overlays"):
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    if args.mllm_scripted:
        data["mllm_backend"] = {"kind": "scripted", "path": args.mllm_scripted}
    elif args.mllm_url:
        data["mllm_backend"] = {"kind": "http", "url": args.mllm_url, "model": args.mllm_model or "gpt-4o"}
    if args.api_key_env and data.get("mllm_backend", {}).get("kind") == "http":
        data["mllm_backend"]["api_key_env"] = args.api_key_env
    mb = data.get("mllm_backend")
    if mb and mb.get("kind") == "scripted" and args.config and not args.mllm_scripted:
        # scripted paths in a config file are relative to that file
        path = Path(mb["path"])
        if not path.is_absolute():
            mb["path"] = str(base / path)
    if args.seg:
        data["seg_backend"] = {"kind": args.seg}
        if args.seg == "remote":
            if not args.seg_url:
                raise SystemExit("--seg remote needs --seg-url")
            data["seg_backend"]["url"] = args.seg_url
    return RunConfig.from_json(data)


def _load(args) -> Any:
    manifest = Path(args.manifest)
    root = Path(args.root) if args.root else manifest.parent
    corpus = load_corpus(root, manifest)
    for sid, msg in corpus.errors:
        log.warning("load error %s: %s", sid, msg)
    return corpus


def cmd_render(args) -> int:
    grid = GridSpec(rows=args.rows or args.density, cols=args.cols or args.density)
    with Image.open(args.image) as img:
        norm = normalize_image(np.asarray(img.convert("RGB")), grid)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    pair = render_split_prompts(norm, grid)
    written = {
        out / f"{stem}_raw.png": norm,
        out / f"{stem}_rows.png": pair.row_annotated,
        out / f"{stem}_cols.png": pair.col_annotated,
    }
    if args.grid_style:
        written[out / f"{stem}_grid.png"] = render_grid_prompt(norm, grid)
    for path, raster in written.items():
        path.write_bytes(encode_png(raster))
        print(path)
    return 0


def cmd_infer(args) -> int:
    cfg = build_config(args)
    if cfg.seg_backend.get("kind") == "oracle":
        raise SystemExit("infer has no ground truth; use --seg full or --seg remote")
    path = Path(args.image)
    with Image.open(path) as img:
        width, height = img.size
    sample = Sample(id=args.sample_id or path.stem, image_path=path, query=args.query, width=width, height=height)
    result = Runner(cfg, [sample]).run_sample(sample)
    t = result.transcript
    print(json.dumps({
        "sample_id": sample.id,
        "status": result.status,
        "proposal": t.parsed if t else None,
        "warnings": t.warnings if t else [],
        "rect": list(result.rect.as_tuple()) if result.rect else None,
        "mask_pixels": result.pred_mask.popcount(),
        "error": result.error,
    }, indent=1))
    if args.mask_out:
        Image.fromarray(result.pred_mask.bits.astype(np.uint8) * 255).save(args.mask_out)
    return 0 if result.status in ("ok", "absent") else 1


def cmd_eval(args) -> int:
    cfg = build_config(args)
    corpus = _load(args)
    report = run_eval(cfg, corpus)
    print(render_markdown(report.to_json()), end="")
    return 2 if report.failed else 0


def _parse_axis(spec: str):
    name, _, values = spec.partition("=")
    if not values:
        raise SystemExit(f"bad --axis {spec!r}; expected name=v1,v2,...")
    out = []
    for v in values.split(","):
        try:
            out.append(json.loads(v))
        except ValueError:
            out.append(v)
    return name, out


def cmd_ablate(args) -> int:
    cfg = build_config(args)
    corpus = _load(args)
    axes = dict(_parse_axis(a) for a in args.axis or [])
    results = run_ablation(cfg, axes, corpus, cap=args.cap)
    print(ablation_table(results), end="")
    return 0


def cmd_import_reasonseg(args) -> int:
    entries = import_reasonseg(args.src, split=args.split, by_query_length=args.by_query_length)
    for e in entries:
        e["image"] = str(Path(args.src).resolve() / e["image"])
    write_manifest(args.out, entries)
    print(f"wrote {len(entries)} samples to {args.out}")
    return 0


def cmd_import_coco(args) -> int:
    entries, cats = import_coco(args.annotations, split=args.split)
    if args.images:
        for e in entries:
            e["image"] = str(Path(args.images).resolve() / e["image"])
    write_manifest(args.out, entries, categories=cats)
    print(f"wrote {len(entries)} samples to {args.out}")
    return 0


def cmd_report(args) -> int:
    with open(args.report, encoding="utf-8") as fh:
        doc = json.load(fh)
    if isinstance(doc, dict) and "samples" in doc:
        print(render_markdown(doc), end="")
    else:
        raise SystemExit("not an evaluation report")
    return 0


def cmd_synth(args) -> int:
    spec = SyntheticSpec(
        seed=args.seed, count=args.count, cover=args.cover,
        grid=GridSpec(rows=args.density, cols=args.density, padding_ratio=args.padding),
        absent_fraction=args.absent_fraction,
    )
    corpus = make_synthetic_corpus(spec, args.out)
    print(f"wrote {len(corpus)} samples to {args.out}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="regionseg", description="Two-stage reasoning segmentation with grid-labelled visual prompts")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="write annotated visual prompts for one image")
    p.add_argument("image")
    p.add_argument("--density", type=int, default=9)
    p.add_argument("--rows", type=int)
    p.add_argument("--cols", type=int)
    p.add_argument("--grid-style", action="store_true", help="also write the single-image grid variant")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("infer", help="run both stages on one image and query")
    p.add_argument("image")
    p.add_argument("query")
    p.add_argument("--sample-id", help="key for scripted responses (default: image stem)")
    p.add_argument("--mask-out", help="write the predicted mask as PNG")
    _add_run_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="evaluate a corpus")
    p.add_argument("manifest")
    p.add_argument("--root", help="directory image paths are relative to (default: manifest dir)")
    _add_run_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="evaluate a cross product of settings")
    p.add_argument("manifest")
    p.add_argument("--root")
    p.add_argument("--axis", action="append", help="e.g. density=5,9,13 or padding=0,0.2,0.4")
    p.add_argument("--cap", type=int, default=64)
    _add_run_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("import-reasonseg", help="convert a ReasonSeg split directory to a manifest")
    p.add_argument("src")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="val", choices=["val", "test"])
    p.add_argument("--by-query-length", action="store_true", help="split into short_query / long_query")
    p.set_defaults(func=cmd_import_reasonseg)

    p = sub.add_parser("import-coco", help="convert COCO-format instance annotations to a manifest")
    p.add_argument("annotations")
    p.add_argument("--images", help="image directory")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="val", choices=["val", "test"])
    p.set_defaults(func=cmd_import_coco)

    p = sub.add_parser("report", help="re-render the markdown table from report.json")
    p.add_argument("report")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth", help="generate a synthetic corpus with scripted responses")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--cover", choices=["exact", "half"], default="exact")
    p.add_argument("--density", type=int, default=9)
    p.add_argument("--padding", type=float, default=0.2)
    p.add_argument("--absent-fraction", type=float, default=0.0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except RegionSegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
