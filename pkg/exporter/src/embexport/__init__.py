"""Feature-vector export toolkit.

Runs images from a manifest through frozen pretrained (or seeded random)
backbones and writes one EMB1 interchange file plus a JSON provenance
sidecar per model family, so downstream metric-learning code can consume
the features without ever importing torch.
"""

from .backbones import FAMILIES, BackboneDescriptor, descriptor
from .emb1 import Emb1Error, read_emb1, verify_emb1, write_emb1
from .export import ExportError, ExportResult, export_manifest
from .manifest import ManifestError, read_manifest

__all__ = [
    "FAMILIES",
    "BackboneDescriptor",
    "descriptor",
    "Emb1Error",
    "read_emb1",
    "verify_emb1",
    "write_emb1",
    "ExportError",
    "ExportResult",
    "export_manifest",
    "ManifestError",
    "read_manifest",
]

__version__ = "0.1.0"
