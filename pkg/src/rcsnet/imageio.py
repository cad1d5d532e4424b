"""Dependency-free PPM (P6) and PGM (P5) readers, bit-exact.

PGM frames are replicated to three channels on read so the rest of the
pipeline only ever sees RGB.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ImageFormatError


@dataclass(frozen=True)
class Image:
    """8-bit RGB raster, row-major (h, w, 3)."""

    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ImageFormatError(f"degenerate image {self.width}x{self.height}")
        if self.pixels.shape != (self.height, self.width, 3) or self.pixels.dtype != np.uint8:
            raise ImageFormatError(
                f"pixels must be uint8 (h, w, 3), got {self.pixels.dtype} {self.pixels.shape}"
            )


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    """Next whitespace-delimited token, skipping '#' comments."""
    n = len(data)
    while pos < n:
        ch = data[pos:pos + 1]
        if ch == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ImageFormatError("truncated header")
    return data[start:pos], pos


def read_image(path) -> Image:
    """Read a binary PPM (P6) or PGM (P5) file."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {data[:2]!r} (want P5 or P6)")
    gray = data[:2] == b"P5"
    pos = 2
    fields = []
    for _ in range(3):
        token, pos = _read_token(data, pos)
        try:
            fields.append(int(token))
        except ValueError:
            raise ImageFormatError(f"bad header token {token!r}") from None
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise ImageFormatError(f"degenerate image {width}x{height}")
    if maxval != 255:
        raise ImageFormatError(f"only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    count = width * height * (1 if gray else 3)
    raw = data[pos:pos + count]
    if len(raw) < count:
        raise ImageFormatError(f"pixel payload truncated: {len(raw)} of {count} bytes")
    arr = np.frombuffer(raw, dtype=np.uint8)
    if gray:
        pixels = np.repeat(arr.reshape(height, width, 1), 3, axis=2)
    else:
        pixels = arr.reshape(height, width, 3).copy()
    return Image(width=width, height=height, pixels=pixels)


def write_ppm(img: Image, path) -> None:
    """Write a binary P6 file (handy for fixtures and demos)."""
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.width} {img.height}\n255\n".encode("ascii"))
        fh.write(img.pixels.tobytes())
