"""Datasets on grid graphs: synthetic denoising, image features, file IO.

The synthetic denoising task draws a uniform random field, blurs it
with a wide Gaussian, and thresholds at 0.5 to get ground-truth binary
images whose regions are smooth blobs.  Observations leak the label
through overlapping uniform ranges:

    node sample   ~ U[0, 0.9] if label 0 else U[0.1, 1]
    edge sample   ~ U[0, 0.8] if endpoints equal else U[0.2, 1]

Each feature vector is the sample plus a constant 1, so unary and
pairwise features are both 2-dimensional.

Datasets serialize to a line-oriented text format: a JSON header line,
then per example a ``example W H`` line followed by ``unary``,
``pairwise`` and optionally ``labels`` lines holding the flattened
tables.  Floats are written with %.17g and round-trip exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .graph import RegionGraph, build_grid

__all__ = [
    "Example", "Dataset", "GenConfig", "gaussian_blur", "gen_denoising",
    "extract_image_features", "save_dataset", "load_dataset",
    "write_label_image", "load_pnm",
]


@dataclass
class Example:
    """One grid instance: features per region, optional gold labeling."""

    graph: RegionGraph
    unary: np.ndarray
    pairwise: np.ndarray
    gold: np.ndarray | None = None
    dims: tuple[int, int] | None = None

    def __post_init__(self):
        V, E = self.graph.num_vars, self.graph.num_edges
        if self.unary.ndim != 2 or self.unary.shape[0] != V:
            raise ValueError(f"unary features shape {self.unary.shape}, "
                             f"want ({V}, d)")
        if self.pairwise.ndim != 2 or self.pairwise.shape[0] != E:
            raise ValueError(f"pairwise features shape "
                             f"{self.pairwise.shape}, want ({E}, d)")
        if self.gold is not None:
            self.gold = np.asarray(self.gold, dtype=np.int64)
            if self.gold.shape != (V,):
                raise ValueError("gold labeling has wrong length")
            if self.gold.min() < 0 or self.gold.max() >= self.graph.num_labels:
                raise ValueError("gold labels out of range")


@dataclass
class Dataset:
    examples: list
    num_labels: int
    d_unary: int
    d_pairwise: int

    def __post_init__(self):
        for k, ex in enumerate(self.examples):
            if ex.graph.num_labels != self.num_labels:
                raise ValueError(f"example {k} has num_labels "
                                 f"{ex.graph.num_labels}")
            if ex.unary.shape[1] != self.d_unary:
                raise ValueError(f"example {k} has d_unary "
                                 f"{ex.unary.shape[1]}")
            if ex.pairwise.shape[1] != self.d_pairwise:
                raise ValueError(f"example {k} has d_pairwise "
                                 f"{ex.pairwise.shape[1]}")

    def __len__(self):
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, k):
        return self.examples[k]


@dataclass
class GenConfig:
    num_train: int = 16
    num_test: int = 16
    width: int = 100
    height: int = 100
    blur_sigma: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.num_train < 0 or self.num_test < 0:
            raise ValueError("image counts must be >= 0")
        if self.width < 1 or self.height < 1:
            raise ValueError(
                f"image dims must be >= 1, got {self.width}x{self.height}")
        if not (self.blur_sigma > 0 and np.isfinite(self.blur_sigma)):
            raise ValueError(
                f"blur_sigma must be positive, got {self.blur_sigma}")


def gaussian_blur(field: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel truncated at ceil(3 sigma).

    Near borders the kernel is renormalized over the in-bounds part, so
    a constant field stays constant.
    """
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 2:
        raise ValueError("blur expects a 2-d field")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    r = int(np.ceil(3.0 * sigma))
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k /= k.sum()

    def blur1(a, axis):
        return ndimage.convolve1d(a, k, axis=axis, mode="constant", cval=0.0)

    num = blur1(blur1(field, 0), 1)
    ones = np.ones_like(field)
    den = blur1(blur1(ones, 0), 1)
    return num / den


_graph_cache: dict = {}


def _grid(width: int, height: int, num_labels: int) -> RegionGraph:
    key = (width, height, num_labels)
    if key not in _graph_cache:
        _graph_cache[key] = build_grid(width, height, num_labels)
    return _graph_cache[key]


def _gen_example(rng: np.random.Generator, cfg: GenConfig) -> Example:
    g = _grid(cfg.width, cfg.height, 2)
    field = rng.random((cfg.height, cfg.width))
    gold = (gaussian_blur(field, cfg.blur_sigma) >= 0.5).astype(np.int64)
    gold = gold.reshape(-1)

    u = rng.random(g.num_vars)
    sample_u = np.where(gold == 0, 0.9 * u, 0.1 + 0.9 * u)
    unary = np.stack([sample_u, np.ones(g.num_vars)], axis=1)

    same = gold[g.edge_i] == gold[g.edge_j]
    ue = rng.random(g.num_edges)
    sample_e = np.where(same, 0.8 * ue, 0.2 + 0.8 * ue)
    pairwise = np.stack([sample_e, np.ones(g.num_edges)], axis=1)
    return Example(g, unary, pairwise, gold, (cfg.width, cfg.height))


def gen_denoising(cfg: GenConfig | None = None) -> tuple[Dataset, Dataset]:
    """Synthetic denoising train/test split, deterministic in the seed."""
    cfg = cfg or GenConfig()
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    train = [_gen_example(rng, cfg) for _ in range(cfg.num_train)]
    test = [_gen_example(rng, cfg) for _ in range(cfg.num_test)]
    return (Dataset(train, 2, 2, 2), Dataset(test, 2, 2, 2))


def extract_image_features(rgb: np.ndarray) -> Example:
    """Grid features of an RGB image in [0, 1]; no labels attached.

    Unary: [1, R, G, B, x/W, y/H].  Pairwise: [1, l2 RGB distance
    between the endpoints, Sobel gradient magnitude averaged over the
    endpoints and normalized by its image-wide max].
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim == 2:
        rgb = np.repeat(rgb[:, :, None], 3, axis=2)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {rgb.shape}")
    H, W = rgb.shape[:2]
    g = _grid(W, H, 2)
    flat = rgb.reshape(-1, 3)
    xs = np.tile(np.arange(W), H) / W
    ys = np.repeat(np.arange(H), W) / H
    unary = np.column_stack([np.ones(H * W), flat, xs, ys])

    gray = rgb.mean(axis=2)
    gx = ndimage.sobel(gray, axis=1, mode="reflect")
    gy = ndimage.sobel(gray, axis=0, mode="reflect")
    mag = np.hypot(gx, gy).reshape(-1)
    top = mag.max()
    if top > 0:
        mag = mag / top
    dist = np.linalg.norm(flat[g.edge_i] - flat[g.edge_j], axis=1)
    mid = 0.5 * (mag[g.edge_i] + mag[g.edge_j])
    pairwise = np.column_stack([np.ones(g.num_edges), dist, mid])
    return Example(g, unary, pairwise, None, (W, H))


def _fmt(arr) -> str:
    return " ".join("%.17g" % v for v in np.asarray(arr).ravel())


def save_dataset(ds: Dataset, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({
            "num_labels": ds.num_labels,
            "d_unary": ds.d_unary,
            "d_pairwise": ds.d_pairwise,
            "num_examples": len(ds),
        }) + "\n")
        for ex in ds:
            if ex.dims is None:
                raise ValueError("only grid examples with dims can be saved")
            w, h = ex.dims
            fh.write(f"example {w} {h}\n")
            fh.write("unary " + _fmt(ex.unary) + "\n")
            fh.write("pairwise " + _fmt(ex.pairwise) + "\n")
            if ex.gold is not None:
                fh.write("labels " + " ".join(str(int(v))
                                              for v in ex.gold) + "\n")


def load_dataset(path: str) -> Dataset:
    """Parse a dataset file; errors carry 1-based line numbers."""

    def fail(lineno, msg):
        raise ValueError(f"{path}: line {lineno}: {msg}")

    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty dataset file")
    try:
        header = json.loads(lines[0])
        L = int(header["num_labels"])
        du = int(header["d_unary"])
        dp = int(header["d_pairwise"])
        count = int(header["num_examples"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise ValueError(f"{path}: line 1: bad header ({e})") from None

    examples = []
    i = 1
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        parts = lines[i].split()
        if parts[0] != "example" or len(parts) != 3:
            fail(i + 1, f"expected 'example W H', got {lines[i][:40]!r}")
        try:
            w, h = int(parts[1]), int(parts[2])
        except ValueError:
            fail(i + 1, "bad grid dimensions")
        g = _grid(w, h, L)
        i += 1
        fields = {}
        while i < len(lines) and lines[i].split()[:1] not in ([], ["example"]):
            key, _, rest = lines[i].partition(" ")
            if key not in ("unary", "pairwise", "labels"):
                fail(i + 1, f"unknown record {key!r}")
            if key in fields:
                fail(i + 1, f"duplicate {key!r} record")
            try:
                fields[key] = np.array(rest.split(), dtype=np.float64)
            except ValueError:
                fail(i + 1, f"unparseable numbers in {key!r} record")
            fields[key + "_line"] = i + 1
            i += 1
        for key, n in (("unary", g.num_vars * du),
                       ("pairwise", g.num_edges * dp)):
            if key not in fields:
                fail(i, f"example missing {key!r} record")
            if fields[key].size != n:
                fail(fields[key + "_line"],
                     f"{key} record has {fields[key].size} values, want {n}")
        gold = None
        if "labels" in fields:
            if fields["labels"].size != g.num_vars:
                fail(fields["labels_line"],
                     f"labels record has {fields['labels'].size} values, "
                     f"want {g.num_vars}")
            gold = fields["labels"].astype(np.int64)
        try:
            examples.append(Example(g,
                                    fields["unary"].reshape(g.num_vars, du),
                                    fields["pairwise"].reshape(g.num_edges,
                                                               dp),
                                    gold, (w, h)))
        except ValueError as e:
            fail(i, str(e))
    if len(examples) != count:
        raise ValueError(f"{path}: header promises {count} examples, "
                         f"found {len(examples)}")
    return Dataset(examples, L, du, dp)


def write_label_image(labeling: np.ndarray, dims: tuple[int, int],
                      num_labels: int, path: str) -> None:
    """Write a labeling as a binary P5 pgm, labels scaled across 0..255."""
    w, h = dims
    lab = np.asarray(labeling, dtype=np.int64)
    if lab.shape != (w * h,):
        raise ValueError(f"labeling length {lab.shape} does not match "
                         f"{w}x{h}")
    scale = 255.0 / max(num_labels - 1, 1)
    pix = np.round(lab * scale).astype(np.uint8).reshape(h, w)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(pix.tobytes())


def load_pnm(path: str) -> np.ndarray:
    """Read a binary P5 (gray) or P6 (RGB) file to floats in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()

    pos = 0

    def token():
        nonlocal pos
        while pos < len(data):
            if data[pos:pos + 1].isspace():
                pos += 1
            elif data[pos:pos + 1] == b"#":
                while pos < len(data) and data[pos:pos + 1] != b"\n":
                    pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        return data[start:pos]

    magic = token()
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported format {magic!r}")
    w, h, maxval = int(token()), int(token()), int(token())
    if maxval <= 0 or maxval > 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace after maxval
    channels = 1 if magic == b"P5" else 3
    need = w * h * channels
    raw = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    if raw.size != need:
        raise ValueError(f"{path}: truncated pixel data")
    img = raw.astype(np.float64) / maxval
    if channels == 1:
        return img.reshape(h, w)
    return img.reshape(h, w, 3)
