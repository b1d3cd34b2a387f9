"""Dense DINOv2 feature export (NFM1) and LPIPS evaluation."""

from .export import ExportError, ExportJob, export_features, load_backbone
from .lpips import LpipsError, eval_lpips
from .nfm import FeatureMap, NfmError, read_nfm1, write_nfm1

__all__ = [
    "ExportError", "ExportJob", "export_features", "load_backbone",
    "LpipsError", "eval_lpips",
    "FeatureMap", "NfmError", "read_nfm1", "write_nfm1",
]
