"""Volumetric muscle-compartment segmentation, architecture measurement,
and EMG validation from 2D direction-field annotations."""

__version__ = "0.1.0"
FORMAT_VERSION = "1"

from .model import (  # noqa: F401
    ArgumentError,
    CompartmenterError,
    Contour,
    DegenerateDataError,
    DegenerateSeedError,
    DirectionField,
    ElectrodeGrid,
    EmptyRegionError,
    Image2D,
    InvalidContourError,
    LabelVolume,
    Matching,
    SampledSet,
    ScalarVolume,
    Streamline,
    TopologyError,
    contour_area,
    point_in_contour,
    points_in_contour,
    resample_volume,
)
from .phantom import PhantomSpec  # noqa: F401
