"""Zero-shot anomaly detection with foreground/background-aware CLIP features."""

from .backbone import EncoderConfig, SyntheticBackbone, TextTokenSequence, TokenStack, build_backbone
from .fg_mask import IndicatorWeights, SoftForegroundMask, build_mask
from .kernels import BACKEND as KERNEL_BACKEND
from .mvfbe import EnhancedFeatureGroup, FBAttention, enhance_all
from .scoring import AnomalyMap, MetricReport
from .scr import SCRConfig
from .text_prompts import FusionWeights, TextFeatureSet

__version__ = "0.1.0"

__all__ = [
    "AnomalyMap",
    "EncoderConfig",
    "EnhancedFeatureGroup",
    "FBAttention",
    "FusionWeights",
    "IndicatorWeights",
    "KERNEL_BACKEND",
    "MetricReport",
    "SCRConfig",
    "SoftForegroundMask",
    "SyntheticBackbone",
    "TextFeatureSet",
    "TextTokenSequence",
    "TokenStack",
    "build_backbone",
    "build_mask",
    "enhance_all",
]
