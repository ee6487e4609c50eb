"""Per-case screening: cascade, component filtering, decision rule and overlap scores."""

from dataclasses import dataclass, field

from .cascade import CascadeConfig, run_cascade
from .metrics import dsc
from .postprocess import (
    CONFIDENCE_SATURATION,
    CONFIDENCE_WEIGHT,
    DEFAULT_K,
    DEFAULT_RATIO,
    ScreeningResult,
    classify,
    confidence_score,
    filter_components,
    tumor_voxel_count,
)


@dataclass
class ScreenConfig:
    K: int = DEFAULT_K
    component_ratio: float = DEFAULT_RATIO
    confidence_weight: float = CONFIDENCE_WEIGHT
    confidence_saturation: int = CONFIDENCE_SATURATION
    cascade: CascadeConfig = field(default_factory=CascadeConfig)


@dataclass
class CaseOutput:
    result: ScreeningResult
    mask: object  # filtered LabelVolume
    cascade: object  # CascadeOutput


def score_mask(case_id, filtered, prob, gt=None, config=None):
    """ScreeningResult for an already filtered mask; DSCs are filled when ``gt`` is given."""
    config = config or ScreenConfig()
    d_t = d_p = None
    if gt is not None:
        d_t = dsc(filtered, gt, 2)
        d_p = dsc(filtered, gt, {1, 2})
    return ScreeningResult(
        case_id=case_id,
        tumor_voxel_count=tumor_voxel_count(filtered),
        confidence=confidence_score(filtered, prob, config.confidence_weight, config.confidence_saturation),
        predicted_label=classify(filtered, config.K),
        dsc_tumor=d_t,
        dsc_pancreas=d_p,
    )


def screen_case(nets, case_id, volume, gt=None, config=None):
    config = config or ScreenConfig()
    out = run_cascade(nets, volume, config.cascade)
    filtered = filter_components(out.labels, ratio=config.component_ratio)
    return CaseOutput(score_mask(case_id, filtered, out.prob, gt, config), filtered, out)
