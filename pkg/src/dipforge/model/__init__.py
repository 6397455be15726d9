from dipforge.model.blocks import (
    RRB,
    RRFB,
    ConfigError,
    Conv3,
    ModelConfig,
    SpatialGate,
    SRNet,
    StudentModel,
    TeacherModel,
    build_model,
    build_student,
    build_teacher,
)
from dipforge.model.kernels import ConvKernel, FusionError, fuse_parallel, fuse_sequential, identity_as_kernel
from dipforge.model.reparam import AlreadyFusedWarning, is_fused, reparameterize

__all__ = [
    "RRB", "RRFB", "ConfigError", "Conv3", "ModelConfig", "SpatialGate", "SRNet", "StudentModel",
    "TeacherModel", "build_model", "build_student", "build_teacher", "ConvKernel", "FusionError",
    "fuse_parallel", "fuse_sequential", "identity_as_kernel", "AlreadyFusedWarning", "is_fused",
    "reparameterize",
]
