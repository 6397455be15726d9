"""Collapse a train-mode network into its single-branch inference form."""
from __future__ import annotations

import copy
import dataclasses
import warnings

from dipforge.model.blocks import RRB, Conv3, SRNet


class AlreadyFusedWarning(UserWarning):
    pass


def reparameterize(model: SRNet) -> SRNet:
    """Return a fused copy of ``model``; the input is left untouched."""
    fused = copy.deepcopy(model)
    if model.mode == "fused":
        warnings.warn("model is already fused; returning an unchanged copy", AlreadyFusedWarning, stacklevel=2)
        return fused
    for block in fused.blocks:
        for name in ("conv1", "conv2", "conv3"):
            stage = getattr(block, name)
            if isinstance(stage, RRB):
                setattr(block, name, Conv3.from_kernel(stage.fuse()))
    fused.config = dataclasses.replace(model.config, mode="fused")
    fused.train(model.training)
    return fused


def is_fused(model: SRNet) -> bool:
    return all(isinstance(s, Conv3) for b in model.blocks for s in b.stages)
