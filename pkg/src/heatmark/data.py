"""Synthetic datasets, the 5-point crop protocol, and bit-exact file formats.

Formats
-------
Tensor file (``LLT1``): magic ``4C 4C 54 31``, u8 rank, rank little-endian
u32 extents, then row-major little-endian float32 payload.  Readers reject
any deviation, including trailing bytes.

Checkpoint container: little-endian u32 entry count, then per entry a u16
name length, the UTF-8 name, and an embedded LLT1 record.

Manifest: UTF-8 tab-separated lines ``path<TAB>K<TAB>x1<TAB>y1...`` with
coordinates printed to 6 decimals; K is constant across a manifest.
"""

from __future__ import annotations

import colorsys
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from heatmark.engine.rng import StreamHub
from heatmark.errors import ContractError, FormatError
from heatmark.heatmaps import LandmarkSet

_MAGIC = b"LLT1"
_MAX_ELEMENTS = 1 << 31


@dataclass
class Sample:
    """One image with optional landmark annotations."""

    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    landmarks: Optional[LandmarkSet] = None

    @property
    def labeled(self) -> bool:
        return self.landmarks is not None


@dataclass
class DatasetManifest:
    root: Path
    paths: list[str] = field(default_factory=list)
    coords: list[np.ndarray] = field(default_factory=list)  # each [K, 2]

    def __len__(self) -> int:
        return len(self.paths)

    @property
    def landmark_count(self) -> int:
        return 0 if not self.coords else self.coords[0].shape[0]

    def load_sample(self, i: int) -> Sample:
        image = read_tensor(Path(self.root) / self.paths[i])
        pts = self.coords[i]
        lm = LandmarkSet(pts.copy()) if pts.size else None
        return Sample(image, lm)

    def load_images(self) -> np.ndarray:
        return np.stack([read_tensor(Path(self.root) / p) for p in self.paths])

    def points_array(self) -> np.ndarray:
        return np.stack(self.coords) if self.coords else np.zeros((0, 0, 2), np.float32)


# -- LLT1 tensor IO ----------------------------------------------------------


def _c_contiguous_f32(tensor) -> np.ndarray:
    arr = np.asarray(tensor, dtype=np.float32)
    # note: ascontiguousarray would promote rank-0 to rank-1
    if arr.ndim and not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    return arr


def write_tensor(path, tensor: np.ndarray) -> None:
    arr = _c_contiguous_f32(tensor)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<B", arr.ndim))
        for extent in arr.shape:
            fh.write(struct.pack("<I", extent))
        fh.write(arr.astype("<f4").tobytes())


def read_tensor(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != _MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}", offset=0)
    if len(blob) < 5:
        raise FormatError(f"{path}: truncated before rank byte", offset=4)
    rank = blob[4]
    header_end = 5 + 4 * rank
    if len(blob) < header_end:
        raise FormatError(f"{path}: truncated extent table", offset=len(blob))
    shape = struct.unpack_from(f"<{rank}I", blob, 5) if rank else ()
    count = 1
    for extent in shape:
        count *= extent
    if count > _MAX_ELEMENTS:
        raise FormatError(f"{path}: extent overflow {shape}", offset=5)
    expected = header_end + 4 * count
    if len(blob) != expected:
        raise FormatError(
            f"{path}: payload length {len(blob) - header_end} != {4 * count}",
            offset=min(len(blob), expected),
        )
    flat = np.frombuffer(blob, dtype="<f4", offset=header_end, count=count)
    return flat.reshape(shape).copy()


# -- checkpoint container ----------------------------------------------------


def write_container(path, entries: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries.items():
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise FormatError(f"entry name too long: {name!r}")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            a = _c_contiguous_f32(arr)
            fh.write(_MAGIC + struct.pack("<B", a.ndim))
            for extent in a.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(a.astype("<f4").tobytes())


def read_container(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    pos = 0

    def need(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"{path}: truncated {what}", offset=len(blob))
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", need(4, "entry count"))
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", need(2, "name length"))
        name = need(nlen, "name").decode("utf-8")
        magic_at = pos
        if need(4, "record magic") != _MAGIC:
            raise FormatError(f"{path}: bad record magic for {name!r}", offset=magic_at)
        rank = need(1, "rank")[0]
        shape = struct.unpack(f"<{rank}I", need(4 * rank, "extents")) if rank else ()
        n = 1
        for extent in shape:
            n *= extent
        if n > _MAX_ELEMENTS:
            raise FormatError(f"{path}: extent overflow in {name!r}", offset=magic_at)
        payload = need(4 * n, f"payload of {name!r}")
        entries[name] = np.frombuffer(payload, dtype="<f4", count=n).reshape(shape).copy()
    if pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - pos} trailing bytes", offset=pos)
    return entries


# -- manifests ----------------------------------------------------------------


def write_manifest(path, manifest: DatasetManifest) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rel, pts in zip(manifest.paths, manifest.coords):
            k = pts.shape[0]
            cells = [rel, str(k)]
            cells += [f"{v:.6f}" for v in np.asarray(pts, dtype=np.float64).reshape(-1)]
            fh.write("\t".join(cells) + "\n")


def read_manifest(path, root=None) -> DatasetManifest:
    path = Path(path)
    manifest = DatasetManifest(root=Path(root) if root else path.parent)
    k_expected = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cells = line.split("\t")
            if len(cells) < 2:
                raise FormatError(f"{path}: line {lineno}: expected at least 2 fields")
            rel = cells[0]
            try:
                k = int(cells[1])
            except ValueError as exc:
                raise FormatError(f"{path}: line {lineno}: bad landmark count {cells[1]!r}") from exc
            if k_expected is None:
                k_expected = k
            elif k != k_expected:
                raise FormatError(
                    f"{path}: line {lineno}: K={k} differs from manifest K={k_expected}"
                )
            if len(cells) != 2 + 2 * k:
                raise FormatError(
                    f"{path}: line {lineno}: expected {2 * k} coordinates, got {len(cells) - 2}"
                )
            try:
                vals = np.array([float(v) for v in cells[2:]], dtype=np.float32)
            except ValueError as exc:
                raise FormatError(f"{path}: line {lineno}: non-numeric coordinate") from exc
            manifest.paths.append(rel)
            manifest.coords.append(vals.reshape(k, 2))
    return manifest


# -- synthetic scene generation ------------------------------------------------

_MARKER_RADIUS = 2.4
_BORDER = 10.0


def _marker_colors(k: int) -> np.ndarray:
    """K saturated, well-separated RGB colors (one per landmark identity)."""
    return np.array(
        [colorsys.hsv_to_rgb(i / k, 1.0, 1.0) for i in range(k)], dtype=np.float32
    )


def _draw_disk(img: np.ndarray, cx: float, cy: float, radius: float, color, alpha=1.0):
    h, w = img.shape[1:]
    y0, y1 = max(0, int(cy - radius - 2)), min(h, int(cy + radius + 3))
    x0, x1 = max(0, int(cx - radius - 2)), min(w, int(cx + radius + 3))
    if y0 >= y1 or x0 >= x1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    dist = np.sqrt((xs - cx) ** 2 + (ys - cy) ** 2)
    cover = np.clip(radius + 0.5 - dist, 0.0, 1.0) * alpha
    for ch in range(3):
        img[ch, y0:y1, x0:x1] += cover * (color[ch] - img[ch, y0:y1, x0:x1])


def _draw_ellipse(img, cx, cy, ax_a, ax_b, angle, color, alpha=1.0, ring=None):
    h, w = img.shape[1:]
    ys, xs = np.mgrid[0:h, 0:w]
    ca, sa = np.cos(angle), np.sin(angle)
    u = ((xs - cx) * ca + (ys - cy) * sa) / ax_a
    v = (-(xs - cx) * sa + (ys - cy) * ca) / ax_b
    r = np.sqrt(u * u + v * v)
    edge = 1.5 / min(ax_a, ax_b)
    if ring is None:
        cover = np.clip((1.0 - r) / edge, 0.0, 1.0) * alpha
    else:
        cover = np.clip((ring - np.abs(r - 1.0)) / edge, 0.0, 1.0) * alpha
    for ch in range(3):
        img[ch] += cover * (color[ch] - img[ch])


def render_scene(size: tuple[int, int], k: int, rng: np.random.Generator):
    """One procedural scene: textured background, an oriented face ellipse,
    K uniquely-colored circular markers inside it, and clutter shapes in
    muted colors.  Returns (image [3,H,W], landmark points [K,2])."""
    h, w = size
    img = np.empty((3, h, w), dtype=np.float32)
    img[:] = rng.uniform(0.12, 0.3)
    for _ in range(rng.integers(2, 5)):
        color = rng.uniform(0.1, 0.5, size=3)
        _draw_ellipse(
            img,
            rng.uniform(0, w),
            rng.uniform(0, h),
            rng.uniform(0.2, 0.6) * w,
            rng.uniform(0.2, 0.6) * h,
            rng.uniform(0, np.pi),
            color,
            alpha=rng.uniform(0.1, 0.3),
        )

    # face ellipse: keep it comfortably inside the frame
    cx = w / 2 + rng.uniform(-0.06, 0.06) * w
    cy = h / 2 + rng.uniform(-0.06, 0.06) * h
    ax_a = rng.uniform(0.3, 0.42) * w
    ax_b = rng.uniform(0.3, 0.42) * h
    angle = rng.uniform(-0.35, 0.35)
    face_color = rng.uniform(0.55, 0.8) * np.ones(3) * rng.uniform(0.85, 1.0, size=3)
    _draw_ellipse(img, cx, cy, ax_a, ax_b, angle, face_color, alpha=0.9)

    # clutter in muted colors (low value or low saturation), never close to
    # the saturated marker palette
    for _ in range(rng.integers(3, 8)):
        hue, val = rng.uniform(0, 1), rng.uniform(0.25, 0.55)
        color = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.0, 0.5), val), np.float32)
        if rng.random() < 0.5:
            _draw_disk(img, rng.uniform(0, w), rng.uniform(0, h), rng.uniform(1.5, 4.0), color)
        else:
            _draw_ellipse(
                img,
                rng.uniform(0, w),
                rng.uniform(0, h),
                rng.uniform(2, 9),
                rng.uniform(2, 9),
                rng.uniform(0, np.pi),
                color,
                ring=0.35,
            )

    # landmark ring inside the ellipse, jittered, clamped to the interior
    colors = _marker_colors(k)
    pts = np.empty((k, 2), dtype=np.float32)
    ca, sa = np.cos(angle), np.sin(angle)
    for i in range(k):
        theta = 2 * np.pi * i / k - np.pi / 2
        ru = 0.55 * ax_a * np.cos(theta) + rng.uniform(-2.0, 2.0)
        rv = 0.55 * ax_b * np.sin(theta) + rng.uniform(-2.0, 2.0)
        px = cx + ru * ca - rv * sa
        py = cy + ru * sa + rv * ca
        pts[i] = (
            np.clip(px, _BORDER, w - 1 - _BORDER),
            np.clip(py, _BORDER, h - 1 - _BORDER),
        )
        _draw_disk(img, pts[i, 0], pts[i, 1], _MARKER_RADIUS, colors[i])

    img += rng.normal(0.0, 0.015, size=img.shape).astype(np.float32)
    np.clip(img, 0.0, 1.0, out=img)
    return img, pts


def detect_marker_centroids(image: np.ndarray, k: int, tol: float = 0.25) -> np.ndarray:
    """Color-matched centroid re-detection; the independent oracle for the
    generator's coordinate bookkeeping."""
    colors = _marker_colors(k)
    pts = np.full((k, 2), np.nan, dtype=np.float64)
    h, w = image.shape[1:]
    ys, xs = np.mgrid[0:h, 0:w]
    for i, c in enumerate(colors):
        dist = np.sqrt(((image - c[:, None, None]) ** 2).sum(axis=0))
        weight = np.clip(tol - dist, 0.0, None)
        total = weight.sum()
        if total > 0:
            pts[i] = ((xs * weight).sum() / total, (ys * weight).sum() / total)
    return pts


def generate_synthetic_dataset(
    out_dir, count: int, size: tuple[int, int], k: int, seed: int, prefix: str = "img"
) -> DatasetManifest:
    """Write ``count`` scenes + manifest under ``out_dir``; pure in (seed, args)."""
    if k < 2:
        raise ContractError("synthetic dataset needs K >= 2")
    if min(size) < 32:
        raise ContractError("synthetic dataset needs size >= 32")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    hub = StreamHub(seed)
    manifest = DatasetManifest(root=out_dir)
    for i in range(count):
        rng = hub.generator("scene", i)
        img, pts = render_scene(size, k, rng)
        rel = f"{prefix}_{i:05d}.llt"
        write_tensor(out_dir / rel, img)
        manifest.paths.append(rel)
        manifest.coords.append(pts)
    write_manifest(out_dir / "manifest.tsv", manifest)
    return manifest


# -- crop protocol -------------------------------------------------------------


def square_crop_from_points(
    image: np.ndarray,
    five_points: LandmarkSet,
    target_size: Optional[tuple[int, int]] = (80, 80),
):
    """Square crop around a 5-point hull, zero-padded at image borders.

    The bounding box of the points is expanded to a square of side
    2 * max(height, width) about the same midpoint (odd sides gain their
    extra pixel on the right/bottom), then resized to ``target_size``.
    Returns ``(crop, points, transform)`` where ``transform`` maps original
    coordinates into crop coordinates (see :func:`apply_transform` /
    :func:`invert_transform`).
    """
    pts = five_points.as_array().astype(np.float64)
    if pts.shape != (5, 2):
        raise ContractError(f"crop protocol expects exactly 5 points, got {pts.shape}")
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    span = hi - lo
    side_f = 2.0 * max(span[0], span[1])
    if side_f <= 0:
        raise ContractError("degenerate five-point hull (all points identical)")
    cx, cy = (lo + hi) / 2.0
    side = int(np.ceil(side_f - 1e-9))
    x_start = int(np.floor(cx - side / 2.0 + 0.5))
    y_start = int(np.floor(cy - side / 2.0 + 0.5))

    c, h, w = image.shape
    crop = np.zeros((c, side, side), dtype=image.dtype)
    sy0, sy1 = max(0, y_start), min(h, y_start + side)
    sx0, sx1 = max(0, x_start), min(w, x_start + side)
    if sy0 < sy1 and sx0 < sx1:
        crop[:, sy0 - y_start : sy1 - y_start, sx0 - x_start : sx1 - x_start] = image[
            :, sy0:sy1, sx0:sx1
        ]

    scale = 1.0
    if target_size is not None:
        crop = resize_bilinear(crop, target_size)
        scale = target_size[1] / side
    transform = (float(x_start), float(y_start), scale)
    new_pts = apply_transform(pts, transform)
    return crop, LandmarkSet(new_pts.astype(np.float32), five_points.visible.copy()), transform


def apply_transform(points: np.ndarray, transform) -> np.ndarray:
    """Original-image coordinates -> crop coordinates (pixel-center aware)."""
    x_start, y_start, scale = transform
    shifted = np.asarray(points, dtype=np.float64) - np.array([x_start, y_start])
    return (shifted + 0.5) * scale - 0.5


def invert_transform(points: np.ndarray, transform) -> np.ndarray:
    x_start, y_start, scale = transform
    back = (np.asarray(points, dtype=np.float64) + 0.5) / scale - 0.5
    return back + np.array([x_start, y_start])


def _resize_matrix(n_out: int, n_in: int) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=np.float32)
    scale = n_in / n_out
    for i in range(n_out):
        u = (i + 0.5) * scale - 0.5
        u = min(max(u, 0.0), n_in - 1.0)
        i0 = int(np.floor(u))
        i1 = min(i0 + 1, n_in - 1)
        f = u - i0
        m[i, i0] += 1.0 - f
        m[i, i1] += f
    return m


def resize_bilinear(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Separable bilinear resize of [C, H, W] with half-pixel sampling."""
    mh = _resize_matrix(size[0], image.shape[1])
    mw = _resize_matrix(size[1], image.shape[2])
    return np.einsum("ih,chw,jw->cij", mh, image, mw, optimize=True).astype(image.dtype)
