"""Segmentation predictor: a small U-Net style encoder-decoder.

Output channel ``k`` scores class ``k`` (channel 0 = background). Softmax over
channels gives the per-pixel distribution used for distillation and class
ranking; an element-wise sigmoid gives the independent per-class
probabilities the binary cross-entropy terms train.
"""

from __future__ import annotations

import copy
import math
import pickle
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DataError


def _block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(inplace=True))


class SegNet(nn.Module):
    def __init__(self, num_outputs: int, width: int = 16, levels: int = 3):
        super().__init__()
        if width < 8:
            raise ValueError("width must be >= 8")
        if not 3 <= levels <= 5:
            raise ValueError("levels must be in 3..5")
        self.width, self.levels = width, levels
        chans = [width * 2 ** i for i in range(levels)]
        self.down = nn.ModuleList([_block(3, chans[0])] + [_block(chans[i - 1], chans[i]) for i in range(1, levels)])
        self.up = nn.ModuleList([_block(chans[i] + chans[i - 1], chans[i - 1]) for i in range(levels - 1, 0, -1)])
        self.head = nn.Conv2d(chans[0], num_outputs, 1)

    @property
    def num_outputs(self) -> int:
        return self.head.out_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """N x 3 x H x W images -> N x K x H x W raw scores."""
        x = x - 0.5
        skips = []
        for i, blk in enumerate(self.down):
            x = blk(x if i == 0 else F.max_pool2d(x, 2, ceil_mode=True))
            skips.append(x)
        x = skips.pop()
        for blk in self.up:
            skip = skips.pop()
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = blk(torch.cat([x, skip], dim=1))
        return self.head(x)

    def probs(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self(x), dim=1)

    def extend_head(self, new_classes) -> None:
        """Append one output channel per new class id.

        New weights are zero so old-class scores are untouched; the new bias
        starts at the background bias minus log(1 + n_new), so new classes
        begin by sharing the background's probability mass.
        """
        new = sorted(int(c) for c in new_classes)
        k = self.num_outputs
        if not new:
            return
        if new[0] < k:
            raise ValueError(f"classes {[c for c in new if c < k]} already have output channels")
        if new != list(range(k, k + len(new))):
            raise ValueError(f"new classes must be {k}..{k + len(new) - 1}, got {new}")
        old = self.head
        head = nn.Conv2d(old.in_channels, k + len(new), 1).to(old.weight.device, old.weight.dtype)
        with torch.no_grad():
            head.weight.zero_()
            head.weight[:k] = old.weight
            head.bias[:k] = old.bias
            head.bias[k:] = old.bias[0] - math.log(1 + len(new))
        self.head = head


def reference_model(num_classes: int, width: int = 16, seed: int = 0, levels: int = 3) -> SegNet:
    """Freshly initialised net with ``num_classes + 1`` outputs, seeded."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return SegNet(num_classes + 1, width, levels)


class ModelSnapshot:
    """Frozen copy of the previous-step model."""

    def __init__(self, model: SegNet, step: int):
        self.model = copy.deepcopy(model).eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.step = step

    @property
    def num_outputs(self) -> int:
        return self.model.num_outputs

    @torch.no_grad()
    def scores(self, x: torch.Tensor) -> torch.Tensor:
        return self.model(x)

    @torch.no_grad()
    def probs(self, x: torch.Tensor) -> torch.Tensor:
        return self.model.probs(x)


def snapshot(model: SegNet, step: int = 0) -> ModelSnapshot:
    return ModelSnapshot(model, step)


def extend_head(model: SegNet, new_classes) -> SegNet:
    model.extend_head(new_classes)
    return model


def save_checkpoint(model: SegNet, path, step: int, classes, seed: int) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save({"state_dict": model.state_dict(), "step": step, "classes": sorted(int(c) for c in classes),
                "seed": seed, "width": model.width, "levels": model.levels,
                "num_outputs": model.num_outputs}, path)


def load_checkpoint(path) -> tuple[SegNet, dict]:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
        model = SegNet(blob["num_outputs"], blob["width"], blob["levels"])
        model.load_state_dict(blob["state_dict"])
    except (OSError, KeyError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from exc
    meta = {k: v for k, v in blob.items() if k != "state_dict"}
    return model, meta


def to_tensor(images) -> torch.Tensor:
    """Stack H x W x 3 arrays into an N x 3 x H x W float32 tensor."""
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()
