"""Projector-based fluorescence readout for tweezer atom arrays.

Simulate frames from the linear photoelectron model, calibrate grid geometry
and per-site projectors offline, reconstruct per-site emissions in three
runtime modes (global least squares, parallel per-site, accelerator-accurate
dataflow emulation), and model/benchmark reconstruction latency.
"""

__version__ = "0.1.0"

from atomdet.core import (
    AtomGrid,
    CalibrationArtifact,
    EmissionMatrix,
    Image,
    OccupancyMatrix,
    Projector,
    PsfKernel,
    Roi,
    extract_roi,
)

__all__ = [
    "AtomGrid",
    "CalibrationArtifact",
    "EmissionMatrix",
    "Image",
    "OccupancyMatrix",
    "Projector",
    "PsfKernel",
    "Roi",
    "extract_roi",
    "__version__",
]
