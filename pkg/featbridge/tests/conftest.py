"""Shared fixtures: a tiny drawn-shapes dataset in the categorized layout.

Images are drawn at the bridge's working resolution (448) so thresholding
and ground-truth comparisons are exact, with no resampling fuzz. The widgets
category has two reference images, one normal query, one blank query (no
foreground at all, exercising the empty candidate stack path), and two
anomalous queries with ground-truth masks in the `<stem>_mask` style.
"""

import numpy as np
import pytest
from PIL import Image

SIZE = 448


def _canvas():
    return np.full((SIZE, SIZE, 3), 255, dtype=np.uint8)


def square_mask():
    m = np.zeros((SIZE, SIZE), dtype=bool)
    m[80:200, 80:200] = True
    return m


def disc_mask():
    yy, xx = np.mgrid[0:SIZE, 0:SIZE]
    return (yy - 300) ** 2 + (xx - 300) ** 2 <= 70 ** 2


def stripe_mask():
    m = np.zeros((SIZE, SIZE), dtype=bool)
    m[380:400, 100:348] = True
    return m


def draw_scene(stripe=False):
    img = _canvas()
    img[square_mask()] = (40, 44, 48)
    img[disc_mask()] = (120, 126, 132)
    if stripe:
        img[stripe_mask()] = (10, 10, 10)
    return img


def save_image(arr, path):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def save_mask(mask, path):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((mask.astype(np.uint8)) * 255, mode="L").save(path)


def build_widgets(root):
    cat = root / "widgets"
    save_image(draw_scene(), cat / "train" / "good" / "000.png")
    save_image(draw_scene(), cat / "train" / "good" / "001.png")
    save_image(draw_scene(), cat / "test" / "good" / "000.png")
    save_image(_canvas(), cat / "test" / "good" / "001.png")
    for i in range(2):
        save_image(draw_scene(stripe=True),
                   cat / "test" / "scratch" / f"{i:03d}.png")
        save_mask(stripe_mask(),
                  cat / "ground_truth" / "scratch" / f"{i:03d}_mask.png")


def build_gears(root):
    cat = root / "gears"
    img = _canvas()
    img[160:280, 180:300] = (60, 60, 70)
    save_image(img, cat / "train" / "good" / "000.png")
    save_image(img, cat / "test" / "good" / "000.png")


@pytest.fixture(scope="session")
def mini_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("mini_mvtec")
    build_widgets(root)
    build_gears(root)
    return root
