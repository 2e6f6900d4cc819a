"""PNG frames and 1-bit masks through Qt's image codecs."""

from __future__ import annotations

import logging

import numpy as np
from PySide6 import QtCore, QtGui

logger = logging.getLogger(__name__)


class ImageFileError(ValueError):
    pass


def _to_qimage(array: np.ndarray, fmt: QtGui.QImage.Format, channels: int) -> QtGui.QImage:
    array = np.ascontiguousarray(array)
    height, width = array.shape[:2]
    # copy() detaches the image from the numpy buffer
    return QtGui.QImage(array.tobytes(), width, height, width * channels, fmt).copy()


def _from_qimage(image: QtGui.QImage, channels: int) -> np.ndarray:
    width, height = image.width(), image.height()
    stride = image.bytesPerLine()
    raw = np.frombuffer(image.constBits(), dtype=np.uint8, count=stride * height).reshape(height, stride)
    return raw[:, : width * channels].reshape(height, width, channels).copy()


def write_png(path, image: np.ndarray) -> None:
    """Save an (H, W, 3) uint8 RGB array."""
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ImageFileError(f"write_png: expected (H, W, 3) uint8, got {image.shape} {image.dtype}")
    qimage = _to_qimage(image, QtGui.QImage.Format.Format_RGB888, 3)
    if not qimage.save(str(path), "PNG"):
        raise ImageFileError(f"write_png: could not write {path}")


def read_png(path) -> np.ndarray:
    """Load a PNG as an (H, W, 3) uint8 RGB array."""
    qimage = QtGui.QImage()
    if not qimage.load(str(path), "PNG"):
        raise ImageFileError(f"read_png: could not decode {path}")
    qimage = qimage.convertToFormat(QtGui.QImage.Format.Format_RGB888)
    return _from_qimage(qimage, 3)


def encode_png(image: np.ndarray) -> bytes:
    """In-memory PNG bytes of an RGB array."""
    qimage = _to_qimage(image, QtGui.QImage.Format.Format_RGB888, 3)
    data = QtCore.QByteArray()
    buffer = QtCore.QBuffer(data)
    buffer.open(QtCore.QIODevice.OpenModeFlag.WriteOnly)
    qimage.save(buffer, "PNG")
    buffer.close()
    return bytes(data.data())


def write_mask(path, mask: np.ndarray) -> None:
    """Save a boolean (H, W) mask as a 1-bit PNG."""
    mask = np.asarray(mask, dtype=bool)
    gray = np.where(mask, 255, 0).astype(np.uint8)[:, :, None]
    qimage = _to_qimage(gray, QtGui.QImage.Format.Format_Grayscale8, 1)
    mono = qimage.convertToFormat(QtGui.QImage.Format.Format_Mono, QtCore.Qt.ImageConversionFlag.ThresholdDither)
    if not mono.save(str(path), "PNG"):
        raise ImageFileError(f"write_mask: could not write {path}")


def read_mask(path) -> np.ndarray:
    qimage = QtGui.QImage()
    if not qimage.load(str(path), "PNG"):
        raise ImageFileError(f"read_mask: could not decode {path}")
    gray = _from_qimage(qimage.convertToFormat(QtGui.QImage.Format.Format_Grayscale8), 1)
    return gray[:, :, 0] > 127
