"""Offline export of frozen vision-backbone features in the VFFT format."""

from .export import ExportJob, export, write_vfft

__version__ = "0.1.0"

__all__ = ["ExportJob", "export", "write_vfft", "__version__"]
