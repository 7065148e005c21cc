"""Per-instance text conditioning for pose-guided diffusion sampling.

Scenes and poses are plain JSON-compatible dicts; arrays come back as numpy.
"""

import json

from . import _finecontrol as _core
from ._finecontrol import FineControlError, cio_diff, cio_sigma, hard_step_count

__all__ = [
    "FineControlError",
    "attention_masks",
    "cio_diff",
    "cio_sigma",
    "generate",
    "hard_step_count",
    "oks",
    "preview_masks",
    "standing_figure",
    "train_toy",
    "validate_scene",
]


def _dump(obj):
    return obj if isinstance(obj, str) else json.dumps(obj)


def standing_figure(center_x, top, height):
    """COCO17 pose dict of a standing figure whose head top sits at `top`."""
    return json.loads(_core.standing_figure(center_x, top, height))


def attention_masks(poses, height, width, tau=0.001, mode="SOFT"):
    return _core.attention_masks([_dump(p) for p in poses], height, width, tau, mode)


def preview_masks(request):
    return json.loads(_core.preview_masks(_dump(request)))


def validate_scene(scene):
    """None for a valid scene, else (json_pointer, message)."""
    return _core.validate_scene(_dump(scene))


def generate(scene, model=""):
    """Returns (image HxWx3, trace dict, list of soft masks)."""
    image, trace, masks = _core.generate(_dump(scene), str(model))
    return image, json.loads(trace), masks


def oks(gt, det, area):
    return _core.oks(_dump(gt), _dump(det), area)


def train_toy(epochs, seed, examples, out):
    return _core.train_toy(epochs, seed, examples, str(out))
