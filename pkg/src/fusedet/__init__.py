"""fusedet: desk-scale multimodal 3D detection with dense input-dependent
object-query initialization and a modality-balanced transformer decoder."""

__version__ = "0.1.0"

from .config import RunConfig  # noqa: F401
