"""PNG/PPM image io. Images are float32 (h, w, 3) in [0, 1]; files are 8-bit."""

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import CheckpointError


def read_image(path):
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except (UnidentifiedImageError, OSError) as e:
        raise CheckpointError(f"cannot read image {path}: {e}") from e
    return arr / 255.0


def write_image(path, image):
    arr = np.clip(np.asarray(image, dtype=np.float32), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)


def to_uint8(image):
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
