"""Iterative structured filter pruning of a fused student.

Channels are pruned in groups. The trunk group holds every channel tied
together by residual additions (head, block outputs, attention gates, tail)
and is ranked by summed filter norms over its producers. Each block's two
inner conv outputs are separate groups ranked on their own.

Masks are kept as lists of surviving *original* channel indices, so a pruned
network can be rebuilt from the unpruned architecture plus its masks.
"""
from __future__ import annotations

import copy
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn

from dipforge.data import SRDataset
from dipforge.distill import pl_loss
from dipforge.metrics import count_flops, count_params
from dipforge.model import ConvKernel, SRNet
from dipforge.model.reparam import is_fused
from dipforge.training import evaluate_psnr, fit, make_sampler, seed_everything

log = logging.getLogger(__name__)


class PruneError(RuntimeError):
    pass


# ------------------------------------------------------------------ ranking

def filter_norms(weight, criterion: str = "l2") -> np.ndarray:
    if isinstance(weight, ConvKernel):
        weight = weight.weight
    w = weight.detach().cpu().double().reshape(weight.shape[0], -1).numpy()
    if criterion == "l2":
        return np.sqrt((w * w).sum(axis=1))
    if criterion == "l1":
        return np.abs(w).sum(axis=1)
    raise ValueError(f"unknown ranking criterion {criterion!r}")


def rank_by_score(scores) -> list:
    """Indices by ascending score; equal scores keep lower indices first."""
    return [int(i) for i in np.argsort(np.asarray(scores), kind="stable")]


def rank_filters_l2(layer) -> list:
    return rank_by_score(filter_norms(layer, "l2"))


def rank_filters_l1(layer) -> list:
    return rank_by_score(filter_norms(layer, "l1"))


def kept_count(n: int, rate: float) -> int:
    """Filters surviving one pruning round (half-up rounding)."""
    return int(math.floor((1.0 - rate) * n + 0.5))


def compounded_counts(n: int, rate: float, rounds: int) -> int:
    for _ in range(rounds):
        n = kept_count(n, rate)
    return n


# ------------------------------------------------------------------- groups

@dataclass
class Group:
    name: str
    producers: list  # module paths whose output channels belong to the group
    consumers: list  # module paths whose input channels belong to the group
    scorers: list  # producers used for ranking


def prune_groups(model: SRNet) -> dict:
    blocks = range(len(model.blocks))
    producers = ["head"] + [f"blocks.{i}.conv3.fused" for i in blocks] + ["tail"]
    consumers = [f"blocks.{i}.conv1.fused" for i in blocks] + ["tail", "upsampler"]
    gates = [i for i in blocks if model.blocks[i].attn is not None]
    groups = {
        "trunk": Group(
            "trunk",
            producers + [f"blocks.{i}.attn.expand" for i in gates],
            consumers + [f"blocks.{i}.attn.reduce" for i in gates],
            producers,
        )
    }
    for i in blocks:
        for j, nxt in ((1, 2), (2, 3)):
            name = f"blocks.{i}.conv{j}"
            groups[name] = Group(name, [f"{name}.fused"], [f"blocks.{i}.conv{nxt}.fused"], [f"{name}.fused"])
    return groups


def group_sizes(model: SRNet) -> dict:
    return {name: model.get_submodule(g.producers[0]).out_channels for name, g in prune_groups(model).items()}


def _slice_conv(conv: nn.Conv2d, out_idx=None, in_idx=None) -> nn.Conv2d:
    w = conv.weight.detach()
    b = conv.bias.detach() if conv.bias is not None else None
    if out_idx is not None:
        idx = torch.as_tensor(out_idx, dtype=torch.long)
        w = w.index_select(0, idx)
        b = b.index_select(0, idx) if b is not None else None
    if in_idx is not None:
        w = w.index_select(1, torch.as_tensor(in_idx, dtype=torch.long))
    new = nn.Conv2d(w.shape[1], w.shape[0], conv.kernel_size, conv.stride, conv.padding, conv.dilation,
                    bias=b is not None).to(w.dtype)
    with torch.no_grad():
        new.weight.copy_(w)
        if b is not None:
            new.bias.copy_(b)
    return new


def _replace(model: nn.Module, path: str, new: nn.Module) -> None:
    parent, _, leaf = path.rpartition(".")
    setattr(model.get_submodule(parent) if parent else model, leaf, new)


def slice_model(model: SRNet, keep: dict) -> SRNet:
    """Copy of ``model`` keeping channel indices ``keep[group]`` (current numbering)."""
    groups = prune_groups(model)
    out_sel, in_sel = {}, {}
    for name, idx in keep.items():
        g = groups[name]
        for p in g.producers:
            out_sel[p] = idx
        for c in g.consumers:
            in_sel[c] = idx
    new = copy.deepcopy(model)
    for path in set(out_sel) | set(in_sel):
        conv = new.get_submodule(path)
        _replace(new, path, _slice_conv(conv, out_sel.get(path), in_sel.get(path)))
    new.prune_masks = getattr(model, "prune_masks", None)
    return new


def current_masks(model: SRNet) -> dict:
    masks = getattr(model, "prune_masks", None)
    if masks is None:
        return {name: list(range(n)) for name, n in group_sizes(model).items()}
    return {k: list(v) for k, v in masks.items()}


def apply_masks(model: SRNet, masks: dict) -> SRNet:
    """Rebuild a pruned network from its unpruned architecture and saved masks."""
    sizes = group_sizes(model)
    unknown = set(masks) - set(sizes)
    if unknown:
        raise PruneError(f"masks name unknown groups {sorted(unknown)}")
    new = slice_model(model, {k: list(v) for k, v in masks.items()})
    new.prune_masks = {k: list(masks.get(k, range(n))) for k, n in sizes.items()}
    return new


def prune_once(model: SRNet, rate: Optional[float] = None, criterion: str = "l2",
               counts: Optional[dict] = None) -> SRNet:
    """One structural pruning pass: drop the lowest-norm filters of every group."""
    if not is_fused(model):
        raise PruneError("pruning operates on a reparameterized (fused) model")
    if counts is None and (rate is None or not 0.0 < rate < 1.0):
        raise PruneError(f"pruning rate must lie in (0, 1), got {rate}")
    masks = current_masks(model)
    keep = {}
    for name, g in prune_groups(model).items():
        n = model.get_submodule(g.producers[0]).out_channels
        k = counts[name] if counts is not None else kept_count(n, rate)
        if k < 1:
            raise PruneError(f"group {name} would be reduced below one filter ({n} -> {k})")
        if k > n:
            raise PruneError(f"group {name} cannot grow from {n} to {k} filters")
        scores = sum(filter_norms(model.get_submodule(p).weight, criterion) for p in g.scorers)
        order = rank_by_score(scores)
        keep[name] = sorted(order[n - k:])
    new = slice_model(model, keep)
    new.prune_masks = {name: [masks[name][i] for i in idx] for name, idx in keep.items()}
    return new


# ---------------------------------------------------------------- recursion

@dataclass
class PruneConfig:
    rate: float = 0.05
    rounds: int = 3
    epsilon: float = 0.10
    criterion: str = "l2"
    finetune_steps: int = 20_000
    lr: float = 2e-5
    halve_every: int = 20_000
    batch_size: int = 16
    patch_size: int = 384
    seed: int = 0

    def validate(self) -> "PruneConfig":
        if not 0.0 < self.rate < 1.0:
            raise PruneError(f"pruning rate must lie in (0, 1), got {self.rate}")
        if self.rounds < 0 or self.epsilon < 0:
            raise PruneError("rounds and epsilon must be non-negative")
        if self.criterion not in ("l1", "l2"):
            raise PruneError(f"unknown criterion {self.criterion!r}")
        return self

    def to_dict(self):
        return asdict(self)


@dataclass
class PruneState:
    iteration: int
    rate: float
    model: SRNet
    masks: dict
    history: list = field(default_factory=list)
    rejected: list = field(default_factory=list)
    diagnostic: str = ""

    @property
    def psnr(self) -> float:
        return self.history[-1]["psnr"]


def finetune(model: SRNet, ds: SRDataset, cfg: PruneConfig, seed_offset: int = 0) -> SRNet:
    """The recovery step between pruning rounds: L2 on (LR, enhanced HR)."""
    seed_everything(cfg.seed + seed_offset)
    model = copy.deepcopy(model)
    masks = getattr(model, "prune_masks", None)
    if cfg.finetune_steps > 0:
        target = "enh" if ds.enh is not None else "hr"
        sampler = make_sampler(ds, cfg.patch_size, cfg.seed + seed_offset, True, target)

        def step(x, y):
            r = pl_loss(model, (x, y))
            return r.total, r.as_row()

        fit(model.parameters(), step, sampler, cfg.finetune_steps, cfg.lr, cfg.halve_every, cfg.batch_size,
            modules=(model,))
    model.eval()
    model.prune_masks = masks
    return model


def _record(state_model: SRNet, iteration: int, val: SRDataset, input_hw=(64, 64)) -> dict:
    return {
        "iteration": iteration,
        "psnr": evaluate_psnr(state_model, val),
        "params": count_params(state_model),
        "flops": count_flops(state_model, input_hw),
        "kept": {k: len(v) for k, v in current_masks(state_model).items()},
    }


def initial_state(model: SRNet, val: SRDataset, rate: float = 0.05) -> PruneState:
    if not is_fused(model):
        raise PruneError("pruning operates on a reparameterized (fused) model")
    return PruneState(0, rate, model, current_masks(model), [_record(model, 0, val)])


def prune_step(state: PruneState, ds: SRDataset, cfg: PruneConfig, val: SRDataset) -> PruneState:
    """``S_p^i = finetune(prune(S_p^{i-1}; r))``."""
    cfg.validate()
    it = state.iteration + 1
    pruned = prune_once(state.model, state.rate, cfg.criterion)
    tuned = finetune(pruned, ds, cfg, seed_offset=it)
    rec = _record(tuned, it, val)
    if rec["params"] >= state.history[-1]["params"]:
        raise PruneError(f"round {it} did not reduce the parameter count")
    return PruneState(it, state.rate, tuned, current_masks(tuned), state.history + [rec], list(state.rejected))


def run_iterative_pruning(model: SRNet, ds: SRDataset, cfg: Optional[PruneConfig] = None,
                          val: Optional[SRDataset] = None, on_round=None) -> PruneState:
    """Prune and finetune repeatedly; stop after ``cfg.rounds`` or once PSNR falls
    more than ``cfg.epsilon`` below the unpruned baseline, keeping the last
    round that stayed within budget."""
    cfg = (cfg or PruneConfig()).validate()
    val = val if val is not None else ds
    state = initial_state(model, val, cfg.rate)
    baseline = state.psnr
    for _ in range(cfg.rounds):
        try:
            nxt = prune_step(state, ds, cfg, val)
        except PruneError as e:
            state.diagnostic = f"stopped at round {state.iteration + 1}: {e}"
            break
        if on_round is not None:
            on_round(nxt)
        if nxt.psnr < baseline - cfg.epsilon:
            state.rejected.append(nxt.history[-1])
            state.diagnostic = (f"round {nxt.iteration} fell to {nxt.psnr:.3f} dB, more than "
                                f"{cfg.epsilon} dB below the {baseline:.3f} dB baseline")
            break
        state = nxt
    if state.iteration == 0 and cfg.rounds > 0:
        msg = state.diagnostic or "no pruning round was accepted"
        state.diagnostic = msg
        warnings.warn(f"pruning returned the unpruned model: {msg}", stacklevel=2)
    return state


def one_stage_prune(model: SRNet, ds: SRDataset, target_rate: Optional[float] = None,
                    cfg: Optional[PruneConfig] = None, val: Optional[SRDataset] = None,
                    match_rounds: Optional[int] = None) -> PruneState:
    """Single prune to the cumulative target followed by a single finetune.

    With ``match_rounds`` the per-group targets are the counts that
    ``match_rounds`` iterative rounds at ``cfg.rate`` would reach, so both
    strategies end at the same size.
    """
    cfg = (cfg or PruneConfig()).validate()
    val = val if val is not None else ds
    state = initial_state(model, val, cfg.rate)
    sizes = group_sizes(model)
    if match_rounds is not None:
        counts = {k: compounded_counts(n, cfg.rate, match_rounds) for k, n in sizes.items()}
    else:
        if target_rate is None or not 0.0 < target_rate < 1.0:
            raise PruneError(f"target rate must lie in (0, 1), got {target_rate}")
        counts = {k: kept_count(n, target_rate) for k, n in sizes.items()}
    pruned = prune_once(model, counts=counts, criterion=cfg.criterion)
    tuned = finetune(pruned, ds, cfg, seed_offset=1)
    rec = _record(tuned, 1, val)
    return PruneState(1, cfg.rate, tuned, current_masks(tuned), state.history + [rec])


def prune_report(state: PruneState) -> dict:
    return {
        "rate": state.rate,
        "iterations": state.iteration,
        "history": state.history,
        "rejected": state.rejected,
        "diagnostic": state.diagnostic,
        "masks": state.masks,
    }
