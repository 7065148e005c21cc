import math

import numpy as np
import pytest

import finecontrol as fc


def two_person_scene(steps=8, mode="FINECONTROL"):
    return {
        "version": 1,
        "canvas": {"h": 64, "w": 64},
        "setting": "indoors",
        "mode": mode,
        "seed": 3,
        "sampler": {"steps": steps, "eta": 0.0, "guidance": 1.0},
        "harmony": {"tau": 0.001, "hard_fraction": 0.25},
        "instances": [
            {"identity": "red", "pose": fc.standing_figure(16, 4, 50)},
            {"identity": "green", "pose": fc.standing_figure(48, 4, 50)},
        ],
    }


@pytest.mark.parametrize("steps,hard", [(4, 1), (20, 5), (50, 13)])
def test_hard_step_count(steps, hard):
    assert fc.hard_step_count(0.25, steps) == hard


def test_masks_partition_unity():
    poses = [fc.standing_figure(x, 4, 50) for x in (20, 32, 44)]
    for mode in ("SOFT", "HARD"):
        m = fc.attention_masks(poses, 64, 64, tau=0.1, mode=mode)
        assert m.shape == (3, 64, 64)
        assert np.all(m >= 0)
        np.testing.assert_allclose(m.sum(axis=0), 1.0, atol=1e-6)


def test_generate_delta_closed_form():
    image, trace, masks = fc.generate(two_person_scene())
    assert image.shape == (64, 64, 3)
    assert trace["hard_steps"] == 2
    assert sum(s["mask_mode"] == "HARD" for s in trace["steps"]) == 2
    assert len(masks) == 2
    np.testing.assert_allclose(masks[0] + masks[1], 1.0, atol=1e-6)
    # Left figure pixels carry the red identity.
    red = image[20:40, 12:20]
    assert red[..., 0].mean() > red[..., 1].mean()


def test_global_mode_is_single_branch():
    _, trace, _ = fc.generate(two_person_scene(mode="GLOBAL"))
    assert trace["branches"] == 1
    assert {s["mask_mode"] for s in trace["steps"]} == {"NONE"}


def test_validation_and_errors():
    scene = two_person_scene()
    assert fc.validate_scene(scene) is None
    del scene["instances"]
    path, _ = fc.validate_scene(scene)
    assert path == "/instances"
    bad = two_person_scene()
    bad["instances"][0]["identity"] = "a wizard"
    with pytest.raises(fc.FineControlError, match="UNKNOWN_TOKEN"):
        fc.generate(bad)


def test_metric_fixtures():
    assert fc.cio_sigma([24.2, 23.0], 0) == pytest.approx(0.7685, abs=1e-4)
    assert fc.cio_diff([24.2, 23.0, 22.0], 0) == pytest.approx(1.7, abs=1e-12)
    pose = fc.standing_figure(32, 4, 50)
    assert fc.oks(pose, pose, 100.0) == pytest.approx(1.0)


def test_preview_overlap_symmetry():
    req = {
        "version": 1,
        "canvas": {"h": 64, "w": 64},
        "poses": [fc.standing_figure(32, 4, 50), fc.standing_figure(32, 4, 50)],
        "harmony": {"tau": 0.001},
    }
    out = fc.preview_masks(req)
    assert len(out["masks"]) == 2


def test_train_toy_writes_checkpoint(tmp_path):
    ckpt = tmp_path / "tiny.ckpt"
    losses = fc.train_toy(epochs=2, seed=1, examples=8, out=ckpt)
    assert len(losses) == 2 and all(math.isfinite(v) for v in losses)
    image, trace, _ = fc.generate(two_person_scene(steps=4), model=ckpt)
    assert np.isfinite(image).all()
    assert trace["hard_steps"] == 1
