"""Two-stage reasoning segmentation: region proposals from a multimodal LLM,
masks from a pluggable segmenter, and gIoU / cIoU / mAP scoring."""

from .errors import RegionSegError
from .geometry import CropRect, GridSpec, PaddingPx, padding_pixels, region_pixel_bounds
from .masks import BinaryMask, rle_decode, rle_encode
from .metrics import IoURecord, ScoredInstance, ciou, giou, iou, map_eval
from .mllm_client import RegionProposal, parse_proposal
from .pipeline import EvalReport, RunConfig, run_ablation, run_eval, run_sample

__version__ = "0.1.0"
