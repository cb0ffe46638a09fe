"""Two-stage orchestration: proposal -> crop -> mask -> score, per sample and per corpus."""
from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from . import metrics
from .corpus import Corpus, Sample
from .errors import AblationError, BackendError, InvalidInputError, ProposalParseError
from .geometry import CropRect, GridSpec, crop, normalize_image, paste_mask, region_pixel_bounds
from .masks import BinaryMask, resize_nearest
from .mllm_client import (
    DEFAULT_BACKOFF,
    DEFAULT_RETRIES,
    MllmBackend,
    MllmTranscript,
    TranscriptWriter,
    backend_from_descriptor,
    parse_proposal,
    query_backend,
)
from .segmentation import SegBackend, SegmentationRequest, seg_backend_from_descriptor, segment
from .visual_prompt import PromptVariant, VisualStyle, make_prompt_bundle

log = logging.getLogger(__name__)

REPORT_SCHEMA = "regionseg-eval-report/1"
# fields that legitimately differ between otherwise identical runs
VOLATILE_KEYS = ("created_at", "timing")
ERROR_STATUSES = ("backend_error", "parse_error", "seg_error")


@dataclass
class RunConfig:
    grid: GridSpec = field(default_factory=lambda: GridSpec(rows=9, cols=9))
    prompt_variant: str = "A"
    visual_style: str = "split"
    temperature: float = 0.0
    mllm_backend: Dict[str, Any] = field(default_factory=lambda: {"kind": "scripted", "path": "responses"})
    seg_backend: Dict[str, Any] = field(default_factory=lambda: {"kind": "oracle"})
    parallelism: int = 1
    output_dir: Optional[str] = None
    fail_fast: bool = False
    failure_budget: float = 0.05
    both_empty_iou: float = 1.0
    compute_map: bool = False
    overlays: bool = False
    retries: int = DEFAULT_RETRIES
    backoff: Tuple[float, ...] = DEFAULT_BACKOFF

    def __post_init__(self) -> None:
        self.prompt_variant = PromptVariant(self.prompt_variant).value
        self.visual_style = VisualStyle(self.visual_style).value
        if self.parallelism < 1:
            raise InvalidInputError("parallelism must be >= 1")
        if not 0.0 <= self.temperature <= 2.0:
            raise InvalidInputError(f"temperature must be in [0, 2], got {self.temperature}")
        self.backoff = tuple(float(b) for b in self.backoff)

    @property
    def padding_ratio(self) -> float:
        return self.grid.padding_ratio

    def to_json(self) -> dict:
        return {
            "grid": self.grid.to_json(),
            "prompt_variant": self.prompt_variant,
            "visual_style": self.visual_style,
            "temperature": self.temperature,
            "mllm_backend": dict(self.mllm_backend),
            "seg_backend": dict(self.seg_backend),
            "parallelism": self.parallelism,
            "output_dir": self.output_dir,
            "fail_fast": self.fail_fast,
            "failure_budget": self.failure_budget,
            "both_empty_iou": self.both_empty_iou,
            "compute_map": self.compute_map,
            "overlays": self.overlays,
            "retries": self.retries,
            "backoff": list(self.backoff),
        }

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> "RunConfig":
        data = dict(data)
        grid = dict(data.pop("grid", {}) or {})
        if "density" in data:
            d = int(data.pop("density"))
            grid.update(rows=d, cols=d)
        if "padding_ratio" in data:
            grid["padding_ratio"] = float(data.pop("padding_ratio"))
        grid.setdefault("rows", 9)
        grid.setdefault("cols", 9)
        known = set(cls.__dataclass_fields__) - {"grid"}
        unknown = set(data) - known
        if unknown:
            raise InvalidInputError(f"unknown config keys: {sorted(unknown)}")
        if "backoff" in data:
            data["backoff"] = tuple(data["backoff"])
        return cls(grid=GridSpec(**grid), **data)


@dataclass
class SampleResult:
    sample_id: str
    pred_mask: BinaryMask
    record: metrics.IoURecord
    transcript: Optional[MllmTranscript]
    status: str
    rect: Optional[CropRect] = None
    ids_v: List[int] = field(default_factory=list)
    ids_h: List[int] = field(default_factory=list)
    object_name: str = ""
    error: Optional[str] = None
    timing: Dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        t = self.transcript
        return {
            "sample_id": self.sample_id,
            "intersection": self.record.intersection,
            "union": self.record.union,
            "iou": self.record.iou,
            "status": self.status,
            "object": self.object_name,
            "ids_v": self.ids_v,
            "ids_h": self.ids_h,
            "rect": list(self.rect.as_tuple()) if self.rect else None,
            "warnings": list(t.warnings) if t else [],
            "request_digest": t.request_digest if t else None,
            "response_sha256": hashlib.sha256(t.raw_response.encode("utf-8")).hexdigest() if t else None,
            "error": self.error,
        }


class Runner:
    """Holds backends and their concurrency limits for one configuration."""

    def __init__(
        self,
        cfg: RunConfig,
        samples: Sequence[Sample] = (),
        mllm: Optional[MllmBackend] = None,
        seg: Optional[SegBackend] = None,
        sleep=time.sleep,
    ):
        self.cfg = cfg
        self._samples = {s.id: s for s in samples}
        self.mllm = mllm or backend_from_descriptor(cfg.mllm_backend)
        self.seg = seg or seg_backend_from_descriptor(cfg.seg_backend, gt_lookup=self.normalized_gt)
        self._mllm_sem = threading.BoundedSemaphore(max(1, int(getattr(self.mllm, "max_parallel", 1))))
        self._seg_sem = threading.BoundedSemaphore(max(1, int(getattr(self.seg, "max_parallel", 1))))
        self._sleep = sleep

    def normalized_gt(self, sample_id: str) -> BinaryMask:
        """Union of a sample's ground truth, resampled to the normalized canvas."""
        s = self._samples[sample_id]
        g = self.cfg.grid
        return resize_nearest(s.gt_union(), g.norm_width, g.norm_height)

    def run_sample(self, s: Sample) -> SampleResult:
        cfg, grid = self.cfg, self.cfg.grid
        self._samples.setdefault(s.id, s)
        t_start = time.perf_counter()
        gt = s.gt_union()
        empty = BinaryMask.zeros(s.width, s.height)
        image = s.load_image()
        norm = normalize_image(image, grid)
        t_first = time.perf_counter()

        bundle = make_prompt_bundle(norm, s.query, grid, cfg.prompt_variant, cfg.visual_style, sample_id=s.id)
        digest = bundle.digest()
        transcript = MllmTranscript(
            sample_id=s.id, request_digest=digest, raw_response="", parsed=None, parse_error=None,
            warnings=[], latency=0.0, backend_id=self.mllm.backend_id, temperature=cfg.temperature,
        )
        status, error, proposal = "ok", None, None
        try:
            with self._mllm_sem:
                completion = query_backend(
                    self.mllm, bundle, cfg.temperature, retries=cfg.retries, backoff=cfg.backoff, sleep=self._sleep
                )
            transcript.raw_response = completion.text
            transcript.latency = completion.latency
            transcript.attempts = completion.attempts
            proposal, warnings = parse_proposal(completion.text, grid)
            transcript.parsed = proposal.to_json()
            transcript.warnings = warnings
        except BackendError as exc:
            status, error = "backend_error", str(exc)
            if cfg.fail_fast:
                raise
        except ProposalParseError as exc:
            status, error = "parse_error", str(exc)
            transcript.parse_error = str(exc)
            if cfg.fail_fast:
                raise
        t_second = time.perf_counter()

        pred, rect = empty, None
        if proposal is not None:
            rect = region_pixel_bounds(grid, proposal.ids_v, proposal.ids_h)
            if rect is None:
                status = "absent"
            else:
                target = proposal.target_text or s.query
                req = SegmentationRequest(crop(norm, rect), target, rect, sample_id=s.id)
                try:
                    with self._seg_sem:
                        crop_mask = segment(self.seg, req)
                    full = paste_mask(crop_mask, rect, (grid.norm_width, grid.norm_height))
                    pred = resize_nearest(full, s.width, s.height)
                except BackendError as exc:
                    status, error = "seg_error", str(exc)
                    if cfg.fail_fast:
                        raise
        t_score = time.perf_counter()

        record = metrics.iou(pred, gt, sample_id=s.id, both_empty=cfg.both_empty_iou)
        t_end = time.perf_counter()
        timing = {
            "first_stage": t_second - t_first,
            "second_stage": t_score - t_second,
            "scoring": t_end - t_score,
            "total": t_end - t_start,
        }
        timing["overhead"] = timing["total"] - timing["first_stage"] - timing["second_stage"]
        return SampleResult(
            sample_id=s.id,
            pred_mask=pred,
            record=record,
            transcript=transcript,
            status=status,
            rect=rect,
            ids_v=list(proposal.ids_v) if proposal else [],
            ids_h=list(proposal.ids_h) if proposal else [],
            object_name=proposal.object_name if proposal else "",
            error=error,
            timing=timing,
        )


def run_sample(cfg: RunConfig, s: Sample, **kwargs) -> Tuple[BinaryMask, metrics.IoURecord, Optional[MllmTranscript]]:
    result = Runner(cfg, [s], **kwargs).run_sample(s)
    return result.pred_mask, result.record, result.transcript


@dataclass
class EvalReport:
    config: dict
    results: List[SampleResult]
    giou: float
    ciou: float
    map: Optional[float]
    failed: bool
    corpus_info: dict
    timing: dict
    created_at: str

    @property
    def records(self) -> List[metrics.IoURecord]:
        return [r.record for r in self.results]

    def status_counts(self) -> Dict[str, int]:
        counts: Dict[str, int] = {}
        for r in self.results:
            counts[r.status] = counts.get(r.status, 0) + 1
        return dict(sorted(counts.items()))

    def to_json(self) -> dict:
        n_err = sum(1 for r in self.results if r.status in ERROR_STATUSES)
        return {
            "schema": REPORT_SCHEMA,
            "created_at": self.created_at,
            "config": self.config,
            "corpus": self.corpus_info,
            "summary": {
                "n": len(self.results),
                "giou": self.giou,
                "ciou": self.ciou,
                "map": self.map,
                "n_errored": n_err,
                "failed": self.failed,
                "status_counts": self.status_counts(),
            },
            "samples": [r.to_json() for r in self.results],
            "timing": self.timing,
        }

    def write(self, out_dir: str | os.PathLike) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        doc = self.to_json()
        with open(out / "report.json", "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1, ensure_ascii=False)
            fh.write("\n")
        with open(out / "report.md", "w", encoding="utf-8") as fh:
            fh.write(render_markdown(doc))
        tpath = out / "transcripts.jsonl"
        tpath.unlink(missing_ok=True)
        writer = TranscriptWriter(tpath)
        for r in self.results:
            if r.transcript is not None:
                writer.write(r.transcript)
        return out / "report.json"


def strip_volatile(doc: dict) -> dict:
    return {k: v for k, v in doc.items() if k not in VOLATILE_KEYS}


def render_markdown(doc: dict) -> str:
    s = doc["summary"]
    cfg = doc["config"]
    g = cfg["grid"]
    lines = [
        "# Evaluation report",
        "",
        f"Grid {g['rows']}x{g['cols']}, padding {g['padding_ratio']}, prompt {cfg['prompt_variant']}, "
        f"visual {cfg['visual_style']}, temperature {cfg['temperature']}",
        "",
        "| metric | value |",
        "|---|---|",
        f"| samples | {s['n']} |",
        f"| gIoU | {s['giou']:.4f} |",
        f"| cIoU | {s['ciou']:.4f} |",
        f"| mAP | {'-' if s['map'] is None else format(s['map'], '.4f')} |",
        f"| errored | {s['n_errored']} |",
        f"| failed | {s['failed']} |",
        "",
    ]
    timing = doc.get("timing") or {}
    if timing:
        lines += [
            "| stage | seconds |",
            "|---|---|",
            *[f"| {k} | {timing[k]:.3f} |" for k in ("first_stage", "second_stage", "overhead", "total", "wall")
              if k in timing],
            "",
        ]
    lines += ["| sample | status | I | U | IoU |", "|---|---|---|---|---|"]
    for r in doc["samples"]:
        lines.append(f"| {r['sample_id']} | {r['status']} | {r['intersection']} | {r['union']} | {r['iou']:.4f} |")
    return "\n".join(lines) + "\n"


def _corpus_map(corpus: Corpus, results: Sequence[SampleResult]) -> Optional[float]:
    if not all(s.category for s in corpus):
        return None
    per_image: Dict[str, Tuple[list, list]] = {}
    for s, r in zip(corpus, results):
        preds, gts = per_image.setdefault(str(s.image_path), ([], []))
        if r.pred_mask.popcount():
            # single-mask pipeline: one instance per query, confidence 1.0
            preds.append(metrics.ScoredInstance(r.pred_mask, 1.0, s.category))
        gts.extend(metrics.GtInstance(m, s.category) for m in s.gt_masks)
    if not any(g for _, g in per_image.values()):
        return None
    cats = corpus.categories or None
    return float(metrics.map_eval(list(per_image.values()), categories=cats)["map"])


def _write_overlay(path: Path, sample: Sample, pred: BinaryMask) -> None:
    img = sample.load_image().astype(np.float32)
    gt = sample.gt_union().bits
    img[gt] = 0.5 * img[gt] + 0.5 * np.array([0, 255, 0])
    img[pred.bits] = 0.5 * img[pred.bits] + 0.5 * np.array([255, 0, 0])
    Image.fromarray(img.clip(0, 255).astype(np.uint8)).save(path)


def run_eval(cfg: RunConfig, corpus: Corpus, runner: Optional[Runner] = None, write: bool = True) -> EvalReport:
    """Evaluate every sample; records come back in manifest order."""
    if len(corpus) == 0:
        raise InvalidInputError("corpus is empty")
    runner = runner or Runner(cfg, corpus.samples)
    wall0 = time.perf_counter()
    if cfg.parallelism == 1:
        results = [runner.run_sample(s) for s in corpus]
    else:
        with ThreadPoolExecutor(max_workers=cfg.parallelism) as pool:
            results = list(pool.map(runner.run_sample, corpus.samples))
    wall = time.perf_counter() - wall0

    records = [r.record for r in results]
    n_err = sum(1 for r in results if r.status in ERROR_STATUSES)
    failed = n_err > cfg.failure_budget * len(results)
    timing = {k: sum(r.timing[k] for r in results) for k in ("first_stage", "second_stage", "scoring", "overhead", "total")}
    timing["wall"] = wall
    timing["per_sample"] = [dict(sample_id=r.sample_id, **r.timing) for r in results]
    report = EvalReport(
        config=cfg.to_json(),
        results=results,
        giou=metrics.giou(records),
        ciou=metrics.ciou(records),
        map=_corpus_map(corpus, results) if cfg.compute_map else None,
        failed=failed,
        corpus_info={
            "manifest": str(corpus.manifest_path) if corpus.manifest_path else None,
            "n_samples": len(corpus),
            "load_errors": [list(e) for e in corpus.errors],
        },
        timing=timing,
        created_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
    )
    if failed:
        log.error("run failed: %d/%d samples errored (budget %.0f%%)", n_err, len(results), 100 * cfg.failure_budget)
    if write and cfg.output_dir:
        report.write(cfg.output_dir)
        if cfg.overlays:
            odir = Path(cfg.output_dir) / "overlays"
            odir.mkdir(exist_ok=True)
            for s, r in zip(corpus, results):
                _write_overlay(odir / f"{s.id.replace('/', '_')}.png", s, r.pred_mask)
    return report


# --------------------------------------------------------------------------- ablation

AXIS_ALIASES = {
    "density": "density",
    "rows": "rows",
    "cols": "cols",
    "padding": "padding_ratio",
    "padding_ratio": "padding_ratio",
    "temperature": "temperature",
    "prompt": "prompt_variant",
    "prompt_variant": "prompt_variant",
    "visual": "visual_style",
    "visual_style": "visual_style",
}
DEFAULT_ABLATION_CAP = 64


def apply_axis(cfg: RunConfig, axis: str, value: Any) -> RunConfig:
    key = AXIS_ALIASES.get(axis)
    if key is None:
        raise AblationError(f"unknown ablation axis {axis!r}; choose from {sorted(AXIS_ALIASES)}")
    g = cfg.grid
    if key == "density":
        return replace(cfg, grid=replace(g, rows=int(value), cols=int(value)))
    if key in ("rows", "cols"):
        return replace(cfg, grid=replace(g, **{key: int(value)}))
    if key == "padding_ratio":
        return replace(cfg, grid=replace(g, padding_ratio=float(value)))
    if key == "temperature":
        return replace(cfg, temperature=float(value))
    return replace(cfg, **{key: value})


def combo_label(combo: Mapping[str, Any]) -> str:
    return ",".join(f"{k}={v}" for k, v in combo.items()) or "base"


def run_ablation(
    base_cfg: RunConfig,
    axes: Mapping[str, Sequence[Any]],
    corpus: Corpus,
    cap: int = DEFAULT_ABLATION_CAP,
) -> List[Tuple[Dict[str, Any], EvalReport]]:
    """One evaluation per point of the cross product of ``axes``."""
    names = list(axes)
    for name in names:
        if name not in AXIS_ALIASES:
            raise AblationError(f"unknown ablation axis {name!r}")
        if not axes[name]:
            raise AblationError(f"axis {name!r} has no values")
    size = 1
    for name in names:
        size *= len(axes[name])
    if size > cap:
        raise AblationError(f"{size} combinations exceed the cap of {cap}")

    out: List[Tuple[Dict[str, Any], EvalReport]] = []
    for values in itertools.product(*(axes[n] for n in names)):
        combo = dict(zip(names, values))
        cfg = base_cfg
        for name, value in combo.items():
            cfg = apply_axis(cfg, name, value)
        if base_cfg.output_dir:
            sub = Path(base_cfg.output_dir) / "ablation" / combo_label(combo).replace("/", "_") if combo else Path(base_cfg.output_dir)
            cfg = replace(cfg, output_dir=str(sub))
        log.info("ablation point %s", combo_label(combo))
        out.append((combo, run_eval(cfg, corpus)))

    if base_cfg.output_dir:
        root = Path(base_cfg.output_dir)
        root.mkdir(parents=True, exist_ok=True)
        (root / "ablation.csv").write_text(ablation_csv(out), encoding="utf-8")
        (root / "ablation.txt").write_text(ablation_table(out), encoding="utf-8")
    return out


METRIC_COLUMNS = ("giou", "ciou", "map")


def _rows(results):
    for combo, rep in results:
        yield {**{k: v for k, v in combo.items()}, "giou": rep.giou, "ciou": rep.ciou,
               "map": rep.map, "failed": rep.failed}


def ablation_csv(results) -> str:
    rows = list(_rows(results))
    fields = list(rows[0]) if rows else ["giou", "ciou", "map", "failed"]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def ablation_table(results) -> str:
    rows = list(_rows(results))
    if not rows:
        return ""
    fields = list(rows[0])

    def fmt(key, v):
        if v is None:
            return "-"
        if isinstance(v, float) and key in METRIC_COLUMNS:
            return f"{v:.4f}"
        return str(v)

    cells = [[fmt(f, r[f]) for f in fields] for r in rows]
    widths = [max(len(f), *(len(c[i]) for c in cells)) for i, f in enumerate(fields)]

    def join(parts):
        return "  ".join(p.ljust(w) for p, w in zip(parts, widths)).rstrip()

    lines = [join(fields), join("-" * w for w in widths), *(join(c) for c in cells)]
    return "\n".join(lines) + "\n"


def load_config(path: str | os.PathLike) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return RunConfig.from_json(json.load(fh))
