"""Samples, manifests, netpbm image I/O and the synthetic relational dataset."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .branch import BoundingBox


class ManifestError(ValueError):
    """A manifest line (or referenced file) violates the format or sample invariants."""

    def __init__(self, message: str, line: int | None = None, path: str | os.PathLike | None = None):
        loc = f"{path}:{line}: " if line is not None else ""
        super().__init__(f"{loc}{message}")
        self.line = line


class ImageFormatError(ValueError):
    pass


# -- netpbm --------------------------------------------------------------------


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    return buf[start:pos], pos


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    tok, pos = _read_token(buf, 0)
    if tok != magic:
        raise ImageFormatError(f"{path}: expected {magic.decode()} header, got {tok[:4]!r}")
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise ImageFormatError(f"{path}: malformed header")
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"{path}: only maxval 255 is supported")
    pos += 1  # single whitespace byte after maxval
    need = w * h * channels
    payload = buf[pos:pos + need]
    if len(payload) != need:
        raise ImageFormatError(f"{path}: truncated pixel data")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape(h, w, channels) if channels > 1 else arr.reshape(h, w)


def write_ppm(path, image: np.ndarray) -> None:
    img = np.ascontiguousarray(image, dtype=np.uint8)
    h, w, _ = img.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + img.tobytes())


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(path, b"P6", 3).copy()


def write_pgm(path, image: np.ndarray) -> None:
    img = np.ascontiguousarray(image, dtype=np.uint8)
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1).copy()


# -- samples and manifests -----------------------------------------------------


@dataclass
class Sample:
    image: np.ndarray
    labels: tuple[int, ...]
    persons: list[tuple[BoundingBox, int]] = field(default_factory=list)
    ident: str = ""

    @property
    def label(self) -> int:
        return self.labels[0]


@dataclass
class Dataset:
    class_names: list[str]
    samples: list[Sample]
    root: Path | None = None

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def images(self, indices=None) -> np.ndarray:
        idx = range(len(self.samples)) if indices is None else indices
        return np.stack([self.samples[i].image for i in idx])

    def label_array(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def subset(self, indices) -> "Dataset":
        return Dataset(self.class_names, [self.samples[i] for i in indices], self.root)


def target_vector(labels, num_classes: int, kind: str) -> np.ndarray:
    """One-hot / multi-hot target; softmax targets are renormalised to sum to 1."""
    t = np.zeros(num_classes, dtype=np.float64)
    t[list(labels)] = 1.0
    if kind == "softmax_ce":
        t /= t.sum()
    return t


MANIFEST_HEADER = "#classes "


def _fmt_num(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def format_manifest_line(image_name: str, sample: Sample) -> str:
    labels = ",".join(str(label) for label in sample.labels)
    persons = ";".join(",".join(_fmt_num(v) for v in box.as_tuple()) + f":{lab}"
                       for box, lab in sample.persons)
    return f"{image_name}|{labels}|{persons}"


def save_manifest(path, dataset: Dataset, image_names: list[str]) -> None:
    if len(set(dataset.class_names)) != len(dataset.class_names):
        raise ManifestError("class names must be unique")
    lines = [MANIFEST_HEADER + ",".join(dataset.class_names)]
    lines += [format_manifest_line(name, s) for name, s in zip(image_names, dataset.samples)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_int(text: str, what: str, lineno: int, path) -> int:
    try:
        return int(text)
    except ValueError:
        raise ManifestError(f"bad {what} {text!r}", lineno, path) from None


def load_manifest(path) -> Dataset:
    """Load ``image.ppm|label[,label...]|x0,y0,x1,y1:label[;...]`` lines.

    The first line names the classes (``#classes a,b,c``); other lines starting
    with ``#`` and blank lines are ignored. Image paths are relative to the
    manifest's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    root = path.parent
    class_names: list[str] | None = None
    samples: list[Sample] = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if line.startswith(MANIFEST_HEADER.strip()):
            names = [n.strip() for n in line[len(MANIFEST_HEADER.strip()):].split(",") if n.strip()]
            if len(set(names)) != len(names) or not names:
                raise ManifestError("class names must be unique and nonempty", lineno, path)
            class_names = names
            continue
        if not line or line.startswith("#"):
            continue
        if class_names is None:
            raise ManifestError("missing '#classes' header before samples", lineno, path)
        parts = line.split("|")
        if len(parts) != 3:
            raise ManifestError(f"expected 3 '|'-separated fields, got {len(parts)}", lineno, path)
        name, label_text, person_text = parts
        labels = tuple(_parse_int(t, "label", lineno, path) for t in label_text.split(",") if t != "")
        if not labels:
            raise ManifestError("sample needs at least one label", lineno, path)
        for lab in labels:
            if not 0 <= lab < len(class_names):
                raise ManifestError(f"label {lab} out of range", lineno, path)
        img_path = root / name
        try:
            image = read_ppm(img_path)
        except FileNotFoundError:
            raise ManifestError(f"image not found: {name}", lineno, path) from None
        except ImageFormatError as exc:
            raise ManifestError(str(exc), lineno, path) from None
        h, w = image.shape[:2]
        persons = []
        for item in filter(None, person_text.split(";")):
            coords, _, lab_text = item.partition(":")
            try:
                vals = [float(v) for v in coords.split(",")]
            except ValueError:
                raise ManifestError(f"bad box {item!r}", lineno, path) from None
            if len(vals) != 4 or not all(math.isfinite(v) for v in vals):
                raise ManifestError(f"box needs 4 finite coordinates: {item!r}", lineno, path)
            x0, y0, x1, y1 = vals
            if x1 <= x0 or y1 <= y0:
                raise ManifestError(f"degenerate box {item!r} (need x_max > x_min, y_max > y_min)",
                                    lineno, path)
            if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
                raise ManifestError(f"box {item!r} outside {w}x{h} image", lineno, path)
            lab = _parse_int(lab_text, "person label", lineno, path)
            if not 0 <= lab < len(class_names):
                raise ManifestError(f"person label {lab} out of range", lineno, path)
            persons.append((BoundingBox(x0, y0, x1, y1), lab))
        samples.append(Sample(image, labels, persons, ident=name))
    return Dataset(class_names or [], samples, root)


# -- synthetic relational data -------------------------------------------------

RELATIONS = ("above", "below", "left", "right")
# horizontal mirroring swaps left and right
RELATION_FLIP_MAP = [0, 1, 3, 2]


class SyntheticSpecError(ValueError):
    pass


@dataclass
class SyntheticSpec:
    image_size: int = 128
    num_classes: int = 4
    actor_size: tuple[int, int] = (18, 28)
    object_radius: tuple[int, int] = (8, 13)
    min_gap: int = 6
    distractors: tuple[int, int] = (0, 2)
    noise: float = 6.0
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 32:
            raise SyntheticSpecError("image_size must be >= 32")
        if not 1 <= self.num_classes <= len(RELATIONS):
            raise SyntheticSpecError(f"num_classes must be in 1..{len(RELATIONS)}")
        self.actor_size = tuple(self.actor_size)
        self.object_radius = tuple(self.object_radius)
        self.distractors = tuple(self.distractors)
        need = self.actor_size[1] + 2 * self.object_radius[1] + self.min_gap + 2
        if need > self.image_size:
            raise SyntheticSpecError(f"shapes need {need}px but image is {self.image_size}px")

    @classmethod
    def for_size(cls, image_size: int, **kw) -> "SyntheticSpec":
        """Defaults with shape sizes scaled from the 128px layout."""
        f = image_size / 128

        def sc(v):
            return max(1, int(round(v * f)))

        base = dict(image_size=image_size, actor_size=(sc(18), sc(28)), object_radius=(sc(8), sc(13)),
                    min_gap=sc(6))
        base.update(kw)
        return cls(**base)


@dataclass
class SceneGeometry:
    actor: BoundingBox
    obj: BoundingBox
    label: int
    distractors: list[BoundingBox] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"actor": list(self.actor.as_tuple()), "object": list(self.obj.as_tuple()),
                "label": self.label, "distractors": [list(b.as_tuple()) for b in self.distractors]}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneGeometry":
        return cls(BoundingBox(*d["actor"]), BoundingBox(*d["object"]), int(d["label"]),
                   [BoundingBox(*b) for b in d.get("distractors", [])])


def relation_of(actor: BoundingBox, obj: BoundingBox) -> int | None:
    """Index into RELATIONS of where ``obj`` lies relative to ``actor``, or None if ambiguous.

    "Strictly above" means the object's bottom edge is above the actor's top edge
    and the vertical offset of the centres dominates the horizontal one.
    """
    acx, acy = (actor.x_min + actor.x_max) / 2, (actor.y_min + actor.y_max) / 2
    ocx, ocy = (obj.x_min + obj.x_max) / 2, (obj.y_min + obj.y_max) / 2
    dx, dy = ocx - acx, ocy - acy
    if abs(dy) > abs(dx):
        if obj.y_max <= actor.y_min:
            return 0
        if obj.y_min >= actor.y_max:
            return 1
    elif abs(dx) > abs(dy):
        if obj.x_max <= actor.x_min:
            return 2
        if obj.x_min >= actor.x_max:
            return 3
    return None


def _place(rng: np.random.Generator, spec: SyntheticSpec, label: int) -> SceneGeometry:
    n = spec.image_size
    for _ in range(10_000):
        a = int(rng.integers(spec.actor_size[0], spec.actor_size[1] + 1))
        r = int(rng.integers(spec.object_radius[0], spec.object_radius[1] + 1))
        ax, ay = rng.integers(0, n - a + 1, size=2)
        ocx, ocy = rng.uniform(r, n - r, size=2)
        obj = BoundingBox(ocx - r, ocy - r, ocx + r, ocy + r)
        actor = BoundingBox(float(ax), float(ay), float(ax + a), float(ay + a))
        if relation_of(actor, obj) != label:
            continue
        # keep a margin so the relation is unambiguous in pixels
        if actor.intersection_area(BoundingBox(obj.x_min - spec.min_gap, obj.y_min - spec.min_gap,
                                               obj.x_max + spec.min_gap, obj.y_max + spec.min_gap)) > 0:
            continue
        acx, acy = (actor.x_min + actor.x_max) / 2, (actor.y_min + actor.y_max) / 2
        dx, dy = abs(ocx - acx), abs(ocy - acy)
        if max(dx, dy) < 1.5 * min(dx, dy):
            continue
        return SceneGeometry(actor, obj, label)
    raise SyntheticSpecError("could not place shapes for the requested geometry")


def _render(rng: np.random.Generator, spec: SyntheticSpec, geo: SceneGeometry) -> np.ndarray:
    n = spec.image_size
    base = rng.uniform(20, 60)
    img = np.full((n, n, 3), base, dtype=np.float64)
    img += rng.normal(0.0, spec.noise, img.shape)
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    k = int(rng.integers(spec.distractors[0], spec.distractors[1] + 1))
    for _ in range(k):
        s = int(rng.integers(6, 12))
        cx, cy = rng.uniform(s, n - s, size=2)
        color = np.array([rng.uniform(60, 140), rng.uniform(140, 230), rng.uniform(60, 140)])
        bar_h = (np.abs(xx - cx) <= s) & (np.abs(yy - cy) <= 1.5)
        bar_v = (np.abs(yy - cy) <= s) & (np.abs(xx - cx) <= 1.5)
        img[bar_h | bar_v] = color
        geo.distractors.append(BoundingBox(cx - s, cy - s, cx + s, cy + s))
    a = geo.actor
    img[int(a.y_min):int(a.y_max), int(a.x_min):int(a.x_max)] = [rng.uniform(170, 255), rng.uniform(30, 90),
                                                                 rng.uniform(30, 90)]
    o = geo.obj
    ocx, ocy, r = (o.x_min + o.x_max) / 2, (o.y_min + o.y_max) / 2, (o.x_max - o.x_min) / 2
    disc = (xx - ocx) ** 2 + (yy - ocy) ** 2 <= r * r
    img[disc] = [rng.uniform(30, 90), rng.uniform(60, 140), rng.uniform(170, 255)]
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def synthesize(spec: SyntheticSpec, n: int) -> tuple[Dataset, list[SceneGeometry]]:
    """Generate ``n`` class-balanced samples in memory (deterministic in ``spec.seed``)."""
    if n < 1:
        raise SyntheticSpecError("n must be >= 1")
    labels = np.arange(n) % spec.num_classes
    order_rng = np.random.default_rng([spec.seed, 0])
    labels = labels[order_rng.permutation(n)]
    samples, geos = [], []
    for i, label in enumerate(labels):
        rng = np.random.default_rng([spec.seed, 1, i])
        geo = _place(rng, spec, int(label))
        image = _render(rng, spec, geo)
        samples.append(Sample(image, (int(label),), [(geo.actor, int(label))], ident=f"{i:05d}.ppm"))
        geos.append(geo)
    return Dataset(list(RELATIONS[:spec.num_classes]), samples), geos


def generate_synthetic(spec: SyntheticSpec, n: int, out_dir) -> Path:
    """Write images, ``manifest.txt`` and ``geometry.json`` into ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset, geos = synthesize(spec, n)
    names = []
    for s in dataset.samples:
        write_ppm(out / s.ident, s.image)
        names.append(s.ident)
    manifest = out / "manifest.txt"
    save_manifest(manifest, dataset, names)
    (out / "geometry.json").write_text(json.dumps([g.to_dict() for g in geos]) + "\n", encoding="utf-8")
    return manifest


def load_geometry(path) -> list[SceneGeometry]:
    return [SceneGeometry.from_dict(d) for d in json.loads(Path(path).read_text(encoding="utf-8"))]


# -- heatmap emission ----------------------------------------------------------


def heatmap_to_gray(values: np.ndarray, out_hw: tuple[int, int] | None = None) -> np.ndarray:
    """Min-max normalise to 0..255 (a constant map gives zeros), then nearest-neighbour upscale."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi > lo:
        gray = np.rint((v - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        gray = np.zeros(v.shape, dtype=np.uint8)
    if out_hw is not None:
        h, w = gray.shape
        rows = (np.arange(out_hw[0]) * h) // out_hw[0]
        cols = (np.arange(out_hw[1]) * w) // out_hw[1]
        gray = gray[rows][:, cols]
    return gray


def emit_heatmap(heatmap, path, out_hw: tuple[int, int] | None = None) -> np.ndarray:
    """Write a heatmap (or raw ``[H, W]`` array) as a binary PGM; returns the pixels written."""
    values = getattr(heatmap, "values", heatmap)
    gray = heatmap_to_gray(values, out_hw)
    write_pgm(path, gray)
    return gray
