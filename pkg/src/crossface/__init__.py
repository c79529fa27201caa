"""Cross-modal face matching: learned descriptor mapping, baselines, evaluation."""

from .dpm import DpmModel, TrainConfig, forward, glorot_init, gradient, loss, map_descriptor_set, train
from .errors import (
    ArtifactError,
    CrossfaceError,
    InvalidInputError,
    InvalidParameterError,
    NumericalFailureError,
    ProtocolError,
    UsageError,
)
from .evaluation import (
    CmcCurve,
    Protocol,
    RocCurve,
    emit_report,
    modality_gap_report,
    run_identification,
    run_verification,
)
from .features import (
    BlockGrid,
    DescriptorSet,
    EmbeddedDescriptor,
    PcaModel,
    RawDescriptor,
    build_descriptor_set,
    embed,
    extract_dense,
    make_grid,
    pca_fit,
)
from .imgproc import GrayImage, dog_filter, gaussian_smooth, median_filter, read_image, read_pgm, write_pgm, zero_mean
from .manifest import Manifest, ManifestRecord
from .matching import GalleryIndex, PipelineModels, Template, build_template, identify, score
from .pls import PlsModel, pls_fit, pls_predict, pls_project
from .synth import SynthConfig, generate

__version__ = "0.1.0"
