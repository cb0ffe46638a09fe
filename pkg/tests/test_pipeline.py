import json

import numpy as np
import pytest
from PIL import Image

from regionseg.corpus import load_corpus, write_manifest
from regionseg.errors import AblationError, BackendUnavailableError, InvalidInputError, TransientBackendError
from regionseg.geometry import GridSpec
from regionseg.masks import BinaryMask, resize_nearest
from regionseg.mllm_client import CallableBackend, RegionProposal, format_proposal
from regionseg.pipeline import (
    RunConfig,
    Runner,
    ablation_csv,
    ablation_table,
    render_markdown,
    run_ablation,
    run_eval,
    run_sample,
    strip_volatile,
)

FULL = RegionProposal("thing", [], "whole image", list(range(1, 10)), list(range(1, 10)))


def _cfg(out, **kw):
    return RunConfig(mllm_backend={"kind": "scripted", "path": str(out / "responses")}, **kw)


def _tiny_corpus(tmp_path, gts):
    """10x10 images with the given ground-truth boolean arrays."""
    entries = []
    for i, gt in enumerate(gts):
        Image.fromarray(np.zeros((10, 10, 3), np.uint8)).save(tmp_path / f"t{i}.png")
        anns = [{"type": "rle", "data": BinaryMask(gt).to_json()}] if gt.any() else []
        entries.append({"id": f"t{i}", "image": f"t{i}.png", "query": "the thing", "annotations": anns})
    write_manifest(tmp_path / "manifest.json", entries)
    return load_corpus(tmp_path)


class PresetSeg:
    """Returns a fixed native-space prediction, upsampled to the full-canvas crop."""

    backend_id = "preset"
    max_parallel = 4

    def __init__(self, preds):
        self.preds = preds

    def segment(self, req):
        w, h = req.crop_dims
        return resize_nearest(BinaryMask(self.preds[req.sample_id]), w, h)


def test_known_iou_corpus(tmp_path):
    gt_a = np.zeros((10, 10), bool)
    gt_a[0, 0:2] = True
    pred_a = np.zeros((10, 10), bool)
    pred_a[0, 0] = True  # I=1, U=2
    gt_b = np.zeros((10, 10), bool)
    gt_b[5, 0:4] = True
    pred_b = np.zeros((10, 10), bool)
    pred_b[5, 0:3] = True  # I=3, U=4
    corpus = _tiny_corpus(tmp_path, [gt_a, gt_b])
    cfg = RunConfig()
    runner = Runner(cfg, corpus.samples, mllm=CallableBackend(lambda b, t: format_proposal(FULL)),
                    seg=PresetSeg({"t0": pred_a, "t1": pred_b}))
    report = run_eval(cfg, corpus, runner=runner, write=False)
    assert [(r.intersection, r.union) for r in report.records] == [(1, 2), (3, 4)]
    assert report.giou == 0.625
    assert report.ciou == 4 / 6


def test_exact_cover_is_perfect(exact_corpus):
    corpus, out = exact_corpus
    report = run_eval(_cfg(out), corpus, write=False)
    assert report.giou == 1.0 and report.ciou == 1.0
    statuses = report.status_counts()
    assert statuses["absent"] >= 1 and set(statuses) == {"ok", "absent"}


def test_absent_proposal_on_nonempty_gt_scores_zero(tmp_path):
    gt = np.zeros((10, 10), bool)
    gt[2:4, 2:4] = True
    corpus = _tiny_corpus(tmp_path, [gt, np.zeros((10, 10), bool)])
    absent = RegionProposal("", [], "nothing there", [], [])
    runner = Runner(RunConfig(), corpus.samples, mllm=CallableBackend(lambda b, t: format_proposal(absent)))
    ious = [runner.run_sample(s).record.iou for s in corpus]
    assert ious == [0.0, 1.0]


def test_error_statuses_and_failure_budget(tmp_path):
    gts = [np.ones((10, 10), bool)] * 20
    corpus = _tiny_corpus(tmp_path, gts)

    def answer(bundle, temperature):
        if bundle.sample_id == "t3":
            return "I cannot help with that."
        if bundle.sample_id == "t7":
            raise TransientBackendError("reset")
        return format_proposal(FULL)

    cfg = RunConfig(retries=1, backoff=(0.0,))
    runner = Runner(cfg, corpus.samples, mllm=CallableBackend(answer, max_parallel=4), sleep=lambda s: None)
    report = run_eval(cfg, corpus, runner=runner, write=False)
    by_id = {r.sample_id: r for r in report.results}
    assert by_id["t3"].status == "parse_error" and by_id["t3"].record.iou == 0.0
    assert by_id["t7"].status == "backend_error" and by_id["t7"].transcript.raw_response == ""
    assert by_id["t0"].record.iou == 1.0
    assert report.failed  # 2/20 > 5%

    cfg_ok = RunConfig(retries=1, backoff=(0.0,), failure_budget=0.1)
    assert not run_eval(cfg_ok, corpus, runner=runner, write=False).failed


def test_fail_fast_raises(tmp_path):
    corpus = _tiny_corpus(tmp_path, [np.ones((10, 10), bool)])

    def boom(bundle, temperature):
        raise TransientBackendError("down")

    cfg = RunConfig(fail_fast=True, retries=0)
    runner = Runner(cfg, corpus.samples, mllm=CallableBackend(boom))
    with pytest.raises(BackendUnavailableError):
        run_eval(cfg, corpus, runner=runner, write=False)


def test_timing_invariant(exact_corpus):
    corpus, out = exact_corpus
    for s in corpus.samples[:3]:
        r = Runner(_cfg(out), corpus.samples).run_sample(s)
        t = r.timing
        assert t["overhead"] == pytest.approx(t["total"] - t["first_stage"] - t["second_stage"], abs=1e-12)
        assert all(t[k] >= 0 for k in ("first_stage", "second_stage", "scoring", "total"))
        assert t["overhead"] >= 0


def test_run_sample_function(exact_corpus):
    corpus, out = exact_corpus
    s = next(s for s in corpus if s.gt_masks)
    pred, record, transcript = run_sample(_cfg(out), s)
    assert pred == s.gt_union() and record.iou == 1.0
    assert transcript.parsed["ids_v"] and transcript.latency > 0


def test_report_files_and_order(exact_corpus, tmp_path):
    corpus, out = exact_corpus
    cfg = _cfg(out, output_dir=str(tmp_path / "run"), parallelism=4, overlays=True)
    run_eval(cfg, corpus)
    doc = json.loads((tmp_path / "run" / "report.json").read_text())
    ids = [s.id for s in corpus]
    assert [r["sample_id"] for r in doc["samples"]] == ids
    lines = (tmp_path / "run" / "transcripts.jsonl").read_text().splitlines()
    assert [json.loads(x)["sample_id"] for x in lines] == ids
    assert (tmp_path / "run" / "report.md").read_text() == render_markdown(doc)
    assert len(list((tmp_path / "run" / "overlays").glob("*.png"))) == len(ids)


def _stable_transcripts(path):
    rows = [json.loads(x) for x in path.read_text().splitlines()]
    for r in rows:
        r.pop("latency")
    return rows


def test_determinism_across_runs_and_parallelism(exact_corpus, tmp_path):
    corpus, out = exact_corpus
    docs, transcripts = [], []
    for par in (1, 8, 1):
        run_dir = tmp_path / "det"
        run_eval(_cfg(out, output_dir=str(run_dir), parallelism=par), corpus)
        doc = json.loads((run_dir / "report.json").read_text())
        doc["config"].pop("parallelism")
        docs.append(json.dumps(strip_volatile(doc), sort_keys=True))
        transcripts.append(_stable_transcripts(run_dir / "transcripts.jsonl"))
    assert docs[0] == docs[1] == docs[2]
    assert transcripts[0] == transcripts[1] == transcripts[2]


def test_map_on_exact_corpus(exact_corpus):
    corpus, out = exact_corpus
    report = run_eval(_cfg(out, compute_map=True), corpus, write=False)
    assert report.map == 1.0


def test_ablation_axes(exact_corpus, tmp_path):
    corpus, out = exact_corpus
    base = _cfg(out, output_dir=str(tmp_path / "abl"))
    res = run_ablation(base, {"density": [5, 9, 13]}, corpus)
    assert [c["density"] for c, _ in res] == [5, 9, 13]
    assert [r.config["grid"]["rows"] for _, r in res] == [5, 9, 13]
    # the scripted ids were written for 9x9
    assert res[1][1].giou == 1.0
    assert (tmp_path / "abl" / "ablation.csv").read_text() == ablation_csv(res)
    assert "density" in ablation_table(res)

    res = run_ablation(_cfg(out), {"padding": [0.0, 0.2, 0.4]}, corpus)
    assert [r.config["grid"]["padding_ratio"] for _, r in res] == [0.0, 0.2, 0.4]
    assert len(run_ablation(_cfg(out), {}, corpus)) == 1


def test_ablation_cap_and_unknown_axis(exact_corpus, tmp_path):
    corpus, out = exact_corpus
    cfg = _cfg(out, output_dir=str(tmp_path / "never"))
    with pytest.raises(AblationError):
        run_ablation(cfg, {"density": list(range(5, 14)), "padding": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]}, corpus)
    assert not (tmp_path / "never").exists()
    with pytest.raises(AblationError):
        run_ablation(cfg, {"colour": [1]}, corpus)
    with pytest.raises(AblationError):
        run_ablation(cfg, {"density": []}, corpus)


def test_config_json_roundtrip():
    cfg = RunConfig.from_json({"density": 13, "padding_ratio": 0.4, "prompt_variant": "B", "temperature": 0.5})
    assert (cfg.grid.rows, cfg.grid.cols, cfg.padding_ratio) == (13, 13, 0.4)
    again = RunConfig.from_json(cfg.to_json())
    assert again.to_json() == cfg.to_json()
    with pytest.raises(InvalidInputError):
        RunConfig.from_json({"densty": 9})
    with pytest.raises(InvalidInputError):
        RunConfig(parallelism=0)
    with pytest.raises(ValueError):
        RunConfig(visual_style="heatmap")
