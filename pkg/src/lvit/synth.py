"""Synthetic chest-image cases: two lungs, 1-3 bright lesions, a matching report.

Geometry is in image coordinates: "left" is the left half of the image and the
vertical terms name thirds of the image height. A lesion occupying a single
cell is reported with that cell's phrase; a tall lesion covering a whole lung
is reported as "all <side> lung".
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .seeding import stream
from .text import Location, StructuredReport, parse_report, render_report

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"
ROWS = ("upper", "middle", "lower")
SIDES = ("left", "right")
PLACEMENT_ATTEMPTS = 100


class PlacementError(RuntimeError):
    pass


class InvariantViolation(ValueError):
    def __init__(self, case_id: str, reason: str):
        super().__init__(f"case {case_id}: {reason}")
        self.case_id = case_id


class HashMismatch(ValueError):
    pass


@dataclass
class SynthParams:
    image_size: int = 64
    min_lesions: int = 1
    max_lesions: int = 3
    radius_range: tuple[float, float] = (0.05, 0.09)  # fraction of image size
    noise_sigma: float = 0.03
    contrast_range: tuple[float, float] = (0.2, 0.5)
    whole_lung_prob: float = 0.1

    def __post_init__(self):
        self.radius_range = tuple(self.radius_range)
        self.contrast_range = tuple(self.contrast_range)
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16")
        if not 1 <= self.min_lesions <= self.max_lesions <= 3:
            raise ValueError("lesion count range must satisfy 1 <= min <= max <= 3")
        lo, hi = self.radius_range
        if not 0 < lo <= hi < 0.15:
            raise ValueError(f"radius_range {self.radius_range} outside (0, 0.15)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


@dataclass
class SynthCase:
    id: str
    image: np.ndarray  # (1, H, W) float64 in [0, 1], 16-bit quantised
    mask: np.ndarray  # (1, H, W) uint8 in {0, 1}
    report: StructuredReport
    split: str = "train"
    labeled: bool = False

    @property
    def report_text(self) -> str:
        return self.report.raw


@dataclass
class Dataset:
    cases: list[SynthCase]
    seed: int = 0
    params: SynthParams = field(default_factory=SynthParams)
    hash: str = ""

    def split(self, name: str) -> list[SynthCase]:
        return [c for c in self.cases if c.split == name]

    def by_id(self, case_id: str) -> SynthCase:
        for c in self.cases:
            if c.id == case_id:
                return c
        raise KeyError(f"no case {case_id!r} in dataset")

    @property
    def image_size(self) -> int:
        return self.params.image_size


# -- geometry ---------------------------------------------------------------


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    return yy, xx


def _lung_shapes(size: int):
    """(cx, cy, rx, ry) for the left and right lung ellipses."""
    return [(0.30 * size, 0.5 * size, 0.17 * size, 0.40 * size), (0.70 * size, 0.5 * size, 0.17 * size, 0.40 * size)]


def _ellipse(size: int, cx, cy, rx, ry) -> np.ndarray:
    yy, xx = _grid(size)
    return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0


def lung_mask(size: int) -> np.ndarray:
    out = np.zeros((size, size), dtype=bool)
    for shape in _lung_shapes(size):
        out |= _ellipse(size, *shape)
    return out


def cell_of(size: int, cy: float, cx: float) -> tuple[str, str]:
    row = ROWS[min(int(3 * cy / size), 2)]
    side = SIDES[0] if cx < size / 2 else SIDES[1]
    return row, side


def components(mask: np.ndarray) -> list[np.ndarray]:
    """Boolean masks of the 4-connected foreground components."""
    labels, n = ndimage.label(np.asarray(mask).astype(bool))
    return [labels == k for k in range(1, n + 1)]


def describe(size: int, comp: np.ndarray) -> Location:
    """Location phrase implied by a lesion component's centroid and extent."""
    cy, cx = ndimage.center_of_mass(comp)
    rows = np.nonzero(comp.any(axis=1))[0]
    covered = {ROWS[min(int(3 * (r + 0.5) / size), 2)] for r in rows}
    row, side = cell_of(size, cy + 0.5, cx + 0.5)
    if len(covered) == 3:
        return Location("all", side)
    return Location(row, side)


# -- generation -------------------------------------------------------------


def _sort_locations(locs: list[Location]) -> list[Location]:
    order = {v: i for i, v in enumerate(("all",) + ROWS)}
    return sorted(locs, key=lambda loc: (order[loc.vertical.split()[0]], SIDES.index(loc.side)))


def _try_place(rng, size, cell, params, lungs, taken) -> np.ndarray | None:
    row, side = cell
    lung = lungs[SIDES.index(side)]
    lo, hi = params.radius_range
    if row == "all":
        cx, cy, rx, ry = _lung_shapes(size)[SIDES.index(side)]
        blob = _ellipse(size, cx + rng.uniform(-0.02, 0.02) * size, cy, rx * 0.55, ry * 0.85)
    else:
        r0 = ROWS.index(row) * size / 3
        cy = rng.uniform(r0 + 0.2 * size / 3, r0 + 0.8 * size / 3)
        x0 = 0 if side == "left" else size / 2
        cx = rng.uniform(x0 + 0.1 * size / 2, x0 + 0.9 * size / 2)
        rx, ry = rng.uniform(lo, hi, size=2) * size
        blob = _ellipse(size, cx, cy, rx, ry)
    if blob.sum() < 4 or (blob & ~lung).any():
        return None
    # one clear pixel between lesions keeps them separate components
    if (ndimage.binary_dilation(blob) & taken).any():
        return None
    comp = components(blob)
    if len(comp) != 1 or describe(size, blob) != Location(row, side):
        return None
    return blob


def generate_case(rng: np.random.Generator, params: SynthParams | None = None, case_id: str = "case") -> SynthCase:
    """Draw one case. Raises PlacementError when a lesion cannot be placed."""
    params = params or SynthParams()
    size = params.image_size
    lungs = [_ellipse(size, *shape) for shape in _lung_shapes(size)]

    cells: list[tuple[str, str]] = []
    if rng.random() < params.whole_lung_prob:
        side = SIDES[rng.integers(2)]
        cells.append(("all", side))
        other = SIDES[1 - SIDES.index(side)]
        extra = int(rng.integers(0, params.max_lesions))
        pool = [(r, other) for r in ROWS]
        for i in rng.permutation(len(pool))[:extra]:
            cells.append(pool[i])
    else:
        count = int(rng.integers(params.min_lesions, params.max_lesions + 1))
        pool = [(r, s) for r in ROWS for s in SIDES]
        cells = [pool[i] for i in rng.permutation(len(pool))[:count]]

    taken = np.zeros((size, size), dtype=bool)
    attempts = 0
    for cell in cells:
        while True:
            attempts += 1
            if attempts > PLACEMENT_ATTEMPTS:
                raise PlacementError(f"{case_id}: could not place lesions {cells} in {PLACEMENT_ATTEMPTS} attempts")
            blob = _try_place(rng, size, cell, params, lungs, taken)
            if blob is not None:
                taken |= blob
                break

    yy, xx = _grid(size)
    image = np.full((size, size), 0.05)
    for (cx, cy, rx, ry), lung in zip(_lung_shapes(size), lungs):
        r2 = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2
        image = np.where(lung, 0.30 + 0.10 * (1 - r2), image)
    for comp in components(taken):
        image = image + comp * rng.uniform(*params.contrast_range)
    image = image + rng.normal(0.0, params.noise_sigma, image.shape)
    image = quantize(np.clip(image, 0.0, 1.0))

    locs = _sort_locations([Location(v, s) for v, s in cells])
    lat = "bilateral" if {loc.side for loc in locs} == set(SIDES) else "unilateral"
    report = StructuredReport(raw="", laterality=lat, lesion_count=len(locs), locations=locs)
    report = parse_report(render_report(report))
    return SynthCase(case_id, image[None], taken.astype(np.uint8)[None], report)


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(image * 65535.0) / 65535.0


def check_case(case: SynthCase) -> None:
    """Raise InvariantViolation when mask, report and geometry disagree."""
    mask = case.mask[0]
    size = mask.shape[-1]
    if mask.shape != (size, size) or case.image.shape != case.mask.shape:
        raise InvariantViolation(case.id, f"image {case.image.shape} / mask {case.mask.shape} shapes disagree")
    if not np.isin(mask, (0, 1)).all():
        raise InvariantViolation(case.id, "mask is not binary")
    if (mask.astype(bool) & ~lung_mask(size)).any():
        raise InvariantViolation(case.id, "lesion pixels outside the lungs")
    comps = components(mask)
    if len(comps) != case.report.lesion_count:
        raise InvariantViolation(
            case.id, f"mask has {len(comps)} components, report says {case.report.lesion_count}"
        )
    found = sorted((describe(size, c) for c in comps), key=lambda loc: (loc.vertical, loc.side))
    stated = sorted(case.report.locations, key=lambda loc: (loc.vertical, loc.side))
    if found != stated:
        raise InvariantViolation(case.id, f"lesion cells {found} do not match report locations {stated}")
    sides = {loc.side for loc in found}
    if (len(sides) == 2) != (case.report.laterality == "bilateral"):
        raise InvariantViolation(case.id, f"laterality {case.report.laterality!r} inconsistent with lesion sides")


# -- splits and files -------------------------------------------------------


def split_sizes(n: int, ratios) -> tuple[int, int, int]:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or ratios[0] <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n_train, n_val = round(ratios[0] * n), round(ratios[1] * n)
    if n_train + n_val > n:
        n_val = n - n_train
    return n_train, n_val, n - n_train - n_val


def labeled_count(n_train: int, label_ratio: float) -> int:
    if not 0 < label_ratio <= 1:
        raise ValueError(f"label_ratio must lie in (0, 1], got {label_ratio}")
    return math.ceil(label_ratio * n_train - 1e-9)


def apply_label_ratio(cases: list[SynthCase], label_ratio: float) -> None:
    """Mark the first ceil(ratio·|train|) train cases (in list order) as labeled."""
    train = [c for c in cases if c.split == "train"]
    k = labeled_count(len(train), label_ratio)
    for i, c in enumerate(train):
        c.labeled = i < k


def build_dataset(seed: int, n_cases: int, params: SynthParams | None = None,
                  split_ratios=(0.6, 0.2, 0.2), label_ratio: float = 0.25) -> Dataset:
    """In-memory dataset; case order is the split shuffle."""
    if n_cases < 10:
        raise ValueError("n_cases must be at least 10")
    params = params or SynthParams()
    n_train, n_val, _ = split_sizes(n_cases, split_ratios)
    labeled_count(n_train, label_ratio)
    order = stream(seed, "split").permutation(n_cases)
    cases = []
    for rank, index in enumerate(order):
        case = generate_case(stream(seed, "case", int(index)), params, case_id=f"case{int(index):04d}")
        case.split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
        cases.append(case)
    apply_label_ratio(cases, label_ratio)
    return Dataset(cases, seed, params)


def write_pgm(path: Path, data: np.ndarray, maxval: int) -> bytes:
    """Binary graymap; 16-bit samples are big-endian as the format requires."""
    data = np.asarray(data)
    h, w = data.shape
    body = data.astype(">u2" if maxval > 255 else "u1").tobytes()
    raw = f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + body
    Path(path).write_bytes(raw)
    return raw


def parse_pgm(raw: bytes) -> tuple[np.ndarray, int]:
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError("not a binary graymap (P5)")
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1  # single whitespace after maxval
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos)
    return data.reshape(h, w), maxval


def read_pgm(path: Path) -> tuple[np.ndarray, int]:
    return parse_pgm(Path(path).read_bytes())


def _manifest_body(dataset: Dataset, split_ratios, label_ratio) -> dict:
    return {
        "version": MANIFEST_VERSION,
        "seed": dataset.seed,
        "params": asdict(dataset.params),
        "split_ratios": list(split_ratios),
        "label_ratio": label_ratio,
        "cases": [
            {
                "id": c.id,
                "image": f"cases/{c.id}_image.pgm",
                "mask": f"cases/{c.id}_mask.pgm",
                "report": c.report.raw,
                "split": c.split,
                "labeled": c.labeled,
            }
            for c in dataset.cases
        ],
    }


def _digest(body: dict, blobs) -> str:
    h = hashlib.sha256(json.dumps(body, sort_keys=True).encode())
    for blob in blobs:
        h.update(blob)
    return h.hexdigest()


def generate_dataset(seed: int, n_cases: int, out_dir, params: SynthParams | None = None,
                     split_ratios=(0.6, 0.2, 0.2), label_ratio: float = 0.25) -> Dataset:
    """Generate, write images/masks plus manifest under ``out_dir``; returns the dataset."""
    dataset = build_dataset(seed, n_cases, params, split_ratios, label_ratio)
    out = Path(out_dir)
    (out / "cases").mkdir(parents=True, exist_ok=True)
    body = _manifest_body(dataset, split_ratios, label_ratio)
    blobs = []
    for case, entry in zip(dataset.cases, body["cases"]):
        blobs.append(write_pgm(out / entry["image"], np.round(case.image[0] * 65535).astype(np.uint16), 65535))
        blobs.append(write_pgm(out / entry["mask"], case.mask[0], 1))
    dataset.hash = _digest(body, blobs)
    (out / MANIFEST_NAME).write_text(json.dumps({**body, "hash": dataset.hash}, indent=1, sort_keys=True))
    return dataset


def load_dataset(path) -> Dataset:
    """Load a manifest (file or its directory), re-checking every case.

    Per-case invariants are checked first so corrupt data is reported by case
    id; the content hash is compared afterwards.
    """
    path = Path(path)
    manifest_path = path / MANIFEST_NAME if path.is_dir() else path
    if not manifest_path.exists():
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    doc = json.loads(manifest_path.read_text())
    root = manifest_path.parent
    stored_hash = doc.pop("hash", "")
    params = SynthParams(**doc["params"])
    cases, blobs = [], []
    for entry in doc["cases"]:
        files = []
        for key in ("image", "mask"):
            f = root / entry[key]
            if not f.exists():
                raise FileNotFoundError(f"case {entry['id']}: missing {key} file {f}")
            files.append(f.read_bytes())
        blobs.extend(files)
        img, img_max = parse_pgm(files[0])
        mask, mask_max = parse_pgm(files[1])
        if img_max != 65535 or mask_max != 1:
            raise InvariantViolation(entry["id"], f"unexpected maxval {img_max}/{mask_max}")
        case = SynthCase(
            entry["id"],
            (img.astype(np.float64) / 65535.0)[None],
            mask.astype(np.uint8)[None],
            parse_report(entry["report"]),
            entry["split"],
            bool(entry["labeled"]),
        )
        check_case(case)
        cases.append(case)
    digest = _digest(doc, blobs)
    if digest != stored_hash:
        raise HashMismatch(f"manifest hash {stored_hash[:12]}… does not match contents {digest[:12]}…")
    return Dataset(cases, doc["seed"], params, digest)
