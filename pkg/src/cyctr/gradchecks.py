"""Finite-difference checks of the full model and of each submodule in isolation.

The full-model functional is the Dice loss on one synthetic episode. A
submodule is checked with its inputs frozen to the values they take in that
same episode and a fixed random projection of its output as the scalar.
"""

from __future__ import annotations

from typing import Callable, Dict, List, Mapping

import numpy as np

from . import numtensor as nt
from .episodes import generate_synthetic_episode, make_splits
from .model import CyCTRModel, dice_loss, downsample_mask, fuse_inputs
from .numtensor import Parameter, Tensor
from .sampling import TokenSequence, make_rng

TOLERANCE = 1e-4
PROJECTION_STREAM = 13


def parameter_group(name: str) -> str:
    """extractor, fusion, layers.<i>.self, layers.<i>.cross, baseline or head."""
    parts = name.split(".")
    if parts[0] == "layers":
        block = "self" if parts[2] in ("self_attn", "norm1", "mlp1", "norm2") else "cross"
        return f"layers.{parts[1]}.{block}"
    return parts[0]


def grouped(params: Mapping[str, Parameter]) -> Dict[str, List[str]]:
    groups: Dict[str, List[str]] = {}
    for name in params:
        groups.setdefault(parameter_group(name), []).append(name)
    return groups


class _Projection:
    """Scalar sum(R * x) with R fixed per call site and scaled to keep f of order one."""

    def __init__(self, seed: int):
        self.rng = make_rng(seed, PROJECTION_STREAM)
        self.cache: Dict[str, np.ndarray] = {}

    def __call__(self, key: str, x: Tensor) -> Tensor:
        if key not in self.cache:
            self.cache[key] = self.rng.normal(size=x.shape) / np.sqrt(x.size)
        return (x * Tensor(self.cache[key])).sum()


def _check(f: Callable[[], Tensor], module: nt.Module, prefix: str, step: float, probes: int, seed: int) -> dict:
    params = {f"{prefix}.{k}": p for k, p in module.parameters().items()}
    report = nt.grad_check(f, params, step=step, probes=probes, seed=seed)
    out = report.to_dict()
    out["passed"] = report.passed(TOLERANCE)
    return out


def check_submodules(model: CyCTRModel, episode, step: float = 1e-5, probes: int = 200, seed: int = 0) -> Dict[str, dict]:
    proj = _Projection(seed)
    images, masks, query = episode.support_images, episode.support_masks, episode.query_image
    H, W = query.shape[:2]
    results: Dict[str, dict] = {}

    def extractor_f():
        mid, high = model.extractor(query)
        return proj("mid", mid) + proj("high", high)

    results["extractor"] = _check(extractor_f, model.extractor, "extractor", step, probes, seed)

    with nt.no_grad():
        q_mid, _ = model.extractor(query)
        s_mid = [model.extractor(img)[0] for img in images]
        frozen = model.encode_inputs(images, masks, query, seed)
    h, w = q_mid.shape[:2]
    small_masks = [downsample_mask(m, (h, w)) for m in masks]

    def fusion_f():
        q_seq, s_seqs = fuse_inputs(model.fusion, q_mid, s_mid, small_masks, frozen.prior)
        total = proj("fused_query", q_seq.tokens)
        for k, s in enumerate(s_seqs):
            total = total + proj(f"fused_support{k}", s.tokens)
        return total

    results["fusion"] = _check(fusion_f, model.fusion, "fusion", step, probes, seed)

    z = frozen.query_seq
    if model.variant == "baseline":
        results["baseline"] = _check(
            lambda: proj("baseline", model.baseline(z).tokens), model.baseline, "baseline", step, probes, seed
        )
        with nt.no_grad():
            z = model.baseline(z)
    for i, layer in enumerate(model.layers):
        z_in = z

        def layer_f(layer=layer, z_in=z_in, i=i):
            return proj(f"layer{i}", layer(z_in, frozen.support, frozen.support_seqs).tokens)

        results[f"layers.{i}"] = _check(layer_f, layer, f"layers.{i}", step, probes, seed)
        with nt.no_grad():
            z = layer(z_in, frozen.support, frozen.support_seqs)
    z_final: TokenSequence = z
    results["head"] = _check(
        lambda: dice_loss(model.head(z_final, (H, W)), episode.query_mask), model.head, "head", step, probes, seed
    )
    return results


def gradcheck_episode(K: int = 1, image_size: int = 32, episode_seed: int = 0, n_classes: int = 12, split: int = 0):
    return generate_synthetic_episode(
        make_splits(range(n_classes), split), "train", K, image_size, image_size, episode_seed
    )


def check_model(
    model: CyCTRModel, episode, step: float = 1e-5, probes: int = 200, seed: int = 0, submodules: bool = True
) -> dict:
    """Grouped full-model check (``probes`` per parameter group) plus the isolated submodule checks."""

    def f():
        out = model(episode.support_images, episode.support_masks, episode.query_image, seed)
        return dice_loss(out.logits, episode.query_mask)

    params = model.parameters()
    report = nt.grad_check(f, params, step=step, probes=probes, seed=seed, groups=grouped(params))
    full = report.to_dict()
    full["passed"] = report.passed(TOLERANCE)
    result = {
        "tolerance": TOLERANCE,
        "step": step,
        "probes_per_group": probes,
        "variant": model.variant,
        "full_model": full,
    }
    worst = [report.max_rel_error]
    if submodules:
        subs = check_submodules(model, episode, step, probes, seed)
        result["submodules"] = subs
        worst += [s["max_rel_error"] for s in subs.values()]
    result["max_rel_error"] = max(worst)
    result["passed"] = result["max_rel_error"] <= TOLERANCE
    return result
