"""Dataset manifest loading, train/test splitting, and a deterministic
synthetic logo/sketch generator.

Disk layout: root/images/<instance_id>.png, root/sketches/<sketch_id>.png,
and root/manifest.csv with header
`sketch_id,instance_id,sketch_path,image_path,subset,split,text_label`.
Paths in the CSV are root-relative; records carry them resolved.

The synthetic generator composes each logo instance from 2..4 primitive
strokes (circle, bar, triangle, arc). Sketches of an instance redraw the
same strokes with endpoint jitter and thickness variation; difficulty tags
raise the per-stroke dropout rate (easy 0, medium 0.1, hard 0.3). All
randomness is keyed as default_rng([seed, instance, sketch]) so the file
tree is bit-identical across runs.
"""

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .images import save_png

SUBSETS = ("easy", "medium", "hard")
MANIFEST_COLUMNS = ("sketch_id", "instance_id", "sketch_path", "image_path",
                    "subset", "split", "text_label")
DROPOUT = {"easy": 0.0, "medium": 0.1, "hard": 0.3}


@dataclass(frozen=True)
class LogoRecord:
    instance_id: str
    image_path: Path
    text_label: str = ""


@dataclass(frozen=True)
class SketchRecord:
    sketch_id: str
    instance_id: str
    path: Path
    subset: str
    split: str = ""


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    logos: tuple
    sketches: tuple

    @property
    def subset_counts(self):
        counts = {s: 0 for s in SUBSETS}
        for sk in self.sketches:
            counts[sk.subset] += 1
        return counts

    def logo_by_id(self, instance_id: str) -> LogoRecord:
        for logo in self.logos:
            if logo.instance_id == instance_id:
                return logo
        raise KeyError(f"unknown instance_id {instance_id!r}")

    def sketches_in(self, split: str):
        return [sk for sk in self.sketches if sk.split == split]


def load_manifest(root) -> DatasetManifest:
    """Read and validate root/manifest.csv; referential integrity enforced."""
    root = Path(root)
    csv_path = root / "manifest.csv"
    if not csv_path.is_file():
        raise ValueError(f"missing manifest file: {csv_path}")
    logos: dict = {}
    sketches = []
    seen_sketch_ids = set()
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"manifest {csv_path} lacks columns {sorted(missing)}")
        for row in reader:
            sid = row["sketch_id"]
            iid = row["instance_id"]
            if sid in seen_sketch_ids:
                raise ValueError(f"duplicate sketch_id {sid!r}")
            seen_sketch_ids.add(sid)
            if row["subset"] not in SUBSETS:
                raise ValueError(
                    f"sketch {sid!r} has bad subset {row['subset']!r}, "
                    f"expected one of {SUBSETS}")
            if row["split"] not in ("train", "test", ""):
                raise ValueError(f"sketch {sid!r} has bad split {row['split']!r}")
            image_path = root / row["image_path"]
            if iid in logos:
                if logos[iid].image_path != image_path:
                    raise ValueError(
                        f"instance {iid!r} maps to conflicting images "
                        f"{logos[iid].image_path} and {image_path}")
            else:
                if not image_path.is_file():
                    raise ValueError(
                        f"sketch {sid!r} references instance {iid!r} whose "
                        f"image is missing: {image_path}")
                logos[iid] = LogoRecord(iid, image_path, row["text_label"])
            sketch_path = root / row["sketch_path"]
            if not sketch_path.is_file():
                raise ValueError(f"sketch {sid!r} file missing: {sketch_path}")
            sketches.append(SketchRecord(sid, iid, sketch_path,
                                         row["subset"], row["split"]))
    return DatasetManifest(root=root, logos=tuple(logos.values()),
                           sketches=tuple(sketches))


def write_manifest(manifest: DatasetManifest):
    """Rewrite root/manifest.csv from the in-memory records."""
    root = manifest.root
    with open(root / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        by_id = {l.instance_id: l for l in manifest.logos}
        for sk in manifest.sketches:
            logo = by_id[sk.instance_id]
            writer.writerow([sk.sketch_id, sk.instance_id,
                             sk.path.relative_to(root).as_posix(),
                             logo.image_path.relative_to(root).as_posix(),
                             sk.subset, sk.split, logo.text_label])


def make_split(manifest: DatasetManifest, mode: str, test_fraction: float,
               seed: int) -> DatasetManifest:
    """Assign train/test split tags.

    by_sketch holds out a share of each instance's sketches (every instance
    stays visible in training); by_instance holds out whole instances.
    """
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction {test_fraction} outside (0,1)")
    if mode not in ("by_sketch", "by_instance"):
        raise ValueError(f"unknown split mode {mode!r}")
    rng = np.random.default_rng(seed)
    test_ids = set()
    if mode == "by_sketch":
        per_instance: dict = {}
        for sk in manifest.sketches:
            per_instance.setdefault(sk.instance_id, []).append(sk.sketch_id)
        for iid in sorted(per_instance):
            ids = sorted(per_instance[iid])
            n_test = int(round(test_fraction * len(ids)))
            if n_test >= len(ids):
                raise ValueError(
                    f"test_fraction {test_fraction} leaves instance {iid!r} "
                    "with no training sketches")
            order = rng.permutation(len(ids))
            test_ids.update(ids[i] for i in order[:n_test])
    else:
        iids = sorted({sk.instance_id for sk in manifest.sketches})
        n_test = int(round(test_fraction * len(iids)))
        if n_test == 0 or n_test >= len(iids):
            raise ValueError(
                f"test_fraction {test_fraction} rounds to {n_test} of "
                f"{len(iids)} test instances; both sides must be non-empty")
        order = rng.permutation(len(iids))
        held = {iids[i] for i in order[:n_test]}
        test_ids = {sk.sketch_id for sk in manifest.sketches
                    if sk.instance_id in held}
    if not test_ids:
        raise ValueError(f"test_fraction {test_fraction} rounds to an empty test side")
    sketches = tuple(
        replace(sk, split="test" if sk.sketch_id in test_ids else "train")
        for sk in manifest.sketches)
    return replace(manifest, sketches=sketches)


# --- synthetic generation ----------------------------------------------------

def _segment_dist(px, py, a, b):
    ax, ay = a
    bx, by = b
    vx, vy = bx - ax, by - ay
    denom = vx * vx + vy * vy
    if denom < 1e-12:
        return np.hypot(px - ax, py - ay)
    t = np.clip(((px - ax) * vx + (py - ay) * vy) / denom, 0.0, 1.0)
    return np.hypot(px - (ax + t * vx), py - (ay + t * vy))


def _stroke_dist(px, py, stroke):
    kind = stroke["kind"]
    if kind == "circle":
        cx, cy = stroke["center"]
        return np.abs(np.hypot(px - cx, py - cy) - stroke["radius"])
    if kind == "bar":
        return _segment_dist(px, py, stroke["a"], stroke["b"])
    if kind == "triangle":
        v = stroke["vertices"]
        return np.minimum.reduce([_segment_dist(px, py, v[i], v[(i + 1) % 3])
                                  for i in range(3)])
    # arc: ring restricted to an angular window, endpoints capped round
    cx, cy = stroke["center"]
    r, theta0, sweep = stroke["radius"], stroke["theta0"], stroke["sweep"]
    ang = np.mod(np.arctan2(py - cy, px - cx) - theta0, 2 * math.pi)
    ring = np.abs(np.hypot(px - cx, py - cy) - r)
    e0 = (cx + r * math.cos(theta0), cy + r * math.sin(theta0))
    t1 = theta0 + sweep
    e1 = (cx + r * math.cos(t1), cy + r * math.sin(t1))
    caps = np.minimum(np.hypot(px - e0[0], py - e0[1]),
                      np.hypot(px - e1[0], py - e1[1]))
    return np.where(ang <= sweep, ring, caps)


def render_strokes(strokes, size: int) -> np.ndarray:
    """Rasterize to [size,size] float in [0,1]; white page, dark ink."""
    coords = (np.arange(size) + 0.5) / size
    px, py = np.meshgrid(coords, coords)
    aa = 1.0 / size
    ink = np.zeros((size, size))
    for stroke in strokes:
        d = _stroke_dist(px, py, stroke)
        alpha = np.clip((stroke["thickness"] / 2 + aa - d) / aa, 0.0, 1.0)
        ink = np.maximum(ink, alpha)
    return 1.0 - ink


def _random_strokes(rng, thickness=0.025):
    strokes = []
    for _ in range(int(rng.integers(2, 5))):
        kind = ("circle", "bar", "triangle", "arc")[int(rng.integers(0, 4))]
        if kind == "circle":
            stroke = {"kind": kind,
                      "center": rng.uniform(0.3, 0.7, size=2),
                      "radius": float(rng.uniform(0.1, 0.25))}
        elif kind == "bar":
            center = rng.uniform(0.25, 0.75, size=2)
            ang = float(rng.uniform(0, 2 * math.pi))
            half = float(rng.uniform(0.12, 0.3))
            d = np.array([math.cos(ang), math.sin(ang)])
            stroke = {"kind": kind, "a": center - half * d, "b": center + half * d}
        elif kind == "triangle":
            stroke = {"kind": kind,
                      "vertices": [rng.uniform(0.15, 0.85, size=2)
                                   for _ in range(3)]}
        else:
            stroke = {"kind": kind,
                      "center": rng.uniform(0.3, 0.7, size=2),
                      "radius": float(rng.uniform(0.12, 0.3)),
                      "theta0": float(rng.uniform(0, 2 * math.pi)),
                      "sweep": float(rng.uniform(math.pi / 2, 1.5 * math.pi))}
        stroke["thickness"] = thickness
        strokes.append(stroke)
    return strokes


def _jitter_strokes(strokes, rng, sigma=0.02):
    out = []
    for stroke in strokes:
        s = dict(stroke)
        if s["kind"] == "circle" or s["kind"] == "arc":
            s["center"] = s["center"] + rng.normal(0, sigma, size=2)
            s["radius"] = max(0.03, s["radius"] + float(rng.normal(0, sigma)))
        elif s["kind"] == "bar":
            s["a"] = s["a"] + rng.normal(0, sigma, size=2)
            s["b"] = s["b"] + rng.normal(0, sigma, size=2)
        else:
            s["vertices"] = [v + rng.normal(0, sigma, size=2)
                             for v in s["vertices"]]
        s["thickness"] = stroke["thickness"] * float(rng.uniform(0.7, 1.3))
        out.append(s)
    return out


def sketch_strokes(base_strokes, instance_index: int, sketch_index: int,
                   seed: int):
    """The jittered stroke set for one sketch; subset drives dropout."""
    subset = SUBSETS[sketch_index % 3]
    rng = np.random.default_rng([seed, instance_index, sketch_index])
    jittered = _jitter_strokes(base_strokes, rng)
    kept = [s for s in jittered if rng.random() >= DROPOUT[subset]]
    if not kept:
        kept = [jittered[0]]
    return kept, subset


def instance_strokes(instance_index: int, seed: int):
    return _random_strokes(np.random.default_rng([seed, instance_index]))


def synth_generate(n_instances: int, sketches_per_instance: int, size: int,
                   seed: int, out_root) -> DatasetManifest:
    """Write a synthetic dataset tree and return its loaded manifest."""
    if n_instances < 2:
        raise ValueError(f"need at least 2 instances, got {n_instances}")
    root = Path(out_root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "sketches").mkdir(parents=True, exist_ok=True)
    rows = []
    for idx in range(n_instances):
        iid = f"logo{idx:04d}"
        base = instance_strokes(idx, seed)
        save_png(root / "images" / f"{iid}.png", render_strokes(base, size))
        label = "+".join(s["kind"] for s in base)
        for j in range(sketches_per_instance):
            strokes, subset = sketch_strokes(base, idx, j, seed)
            sid = f"{iid}_s{j:02d}"
            save_png(root / "sketches" / f"{sid}.png",
                     render_strokes(strokes, size))
            rows.append([sid, iid, f"sketches/{sid}.png", f"images/{iid}.png",
                         subset, "", label])
    with open(root / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        writer.writerows(rows)
    return load_manifest(root)
