"""PGM and PPM images through Pillow, scaled to [0, 1] float64 arrays.

Grayscale images are returned as ``(height, width)`` arrays, color images as
``(3, height, width)`` (channel-first, the layout the solver maps over).
Files are written as 8-bit binary P5 (grayscale) or P6 (color).
"""
import logging
import os
from typing import Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from .compatibility import ImageFormatError

logger = logging.getLogger(__name__)

PathLike = Union[str, "os.PathLike[str]"]

# Pillow widens samples above 8 bits to the full 16-bit range
_MODE_SCALE = {"L": 255.0, "RGB": 255.0, "I": 65535.0, "I;16": 65535.0, "I;16B": 65535.0}


def read_image(path: PathLike) -> np.ndarray:
    """Read a PGM/PPM file into float64 values in [0, 1]"""
    path = os.fspath(path)
    try:
        with Image.open(path) as im:
            if im.format != "PPM":
                raise ImageFormatError(f"unsupported format {im.format}, expected PGM or PPM", path)
            if im.mode not in _MODE_SCALE:
                raise ImageFormatError(f"unsupported image mode {im.mode}", path)
            im.load()
            scale = _MODE_SCALE[im.mode]
            img = np.asarray(im, dtype=np.float64) / scale
            mode = im.mode
    except ImageFormatError:
        raise
    except UnidentifiedImageError as e:
        raise ImageFormatError("not a PGM or PPM file", path) from e
    except OSError as e:
        reason = e.strerror or str(e)
        raise ImageFormatError(f"cannot read file ({reason})", path) from e
    except (SyntaxError, ValueError) as e:
        raise ImageFormatError(f"malformed header ({e})", path) from e

    logger.debug("Read image %s (%s, %s)", path, "x".join(map(str, img.shape)), mode)
    if img.ndim == 2:
        return img
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def write_image(img: np.ndarray, path: PathLike) -> None:
    """Write a (H, W) array as P5 or a (3, H, W) array as P6, 8 bits per sample"""
    path = os.fspath(path)
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim == 2:
        raster = img
    elif img.ndim == 3 and img.shape[0] == 3:
        raster = img.transpose(1, 2, 0)
    else:
        raise ImageFormatError(f"cannot encode array of shape {img.shape}", path)
    if not np.all(np.isfinite(raster)):
        raise ImageFormatError("image contains non-finite values", path)

    data = np.rint(np.clip(raster, 0.0, 1.0) * 255.0).astype(np.uint8)
    try:
        Image.fromarray(np.ascontiguousarray(data)).save(path, format="PPM")
    except OSError as e:
        reason = e.strerror or str(e)
        raise ImageFormatError(f"cannot write file ({reason})", path) from e
    logger.debug("Wrote %s", path)
