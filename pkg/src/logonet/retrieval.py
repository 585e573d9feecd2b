"""Gallery construction, exact nearest-neighbor ranking, and acc@k reports.

Ranking is exhaustive Euclidean distance over the full gallery with stable
tie-breaking by insertion order; galleries are small enough that exactness
beats any index. Every gallery and query embedding goes through the same
one-image-at-a-time path, so stored rows never depend on batch shape.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import Tensor, no_grad
from .images import decode_image
from .model import LogoNetModel, embed, model_fingerprint

KS = (1, 5, 10)


@dataclass(frozen=True)
class Gallery:
    instance_ids: tuple
    embeddings: np.ndarray
    fingerprint: str

    def __post_init__(self):
        if len(self.instance_ids) != self.embeddings.shape[0]:
            raise ValueError(
                f"{len(self.instance_ids)} ids for "
                f"{self.embeddings.shape[0]} embedding rows")
        if len(set(self.instance_ids)) != len(self.instance_ids):
            raise ValueError("gallery instance ids must be unique")


@dataclass(frozen=True)
class RankedResult:
    results: tuple
    rank_of_truth: Optional[int] = None


@dataclass(frozen=True)
class EvalReport:
    overall: dict
    subsets: dict

    def overall_acc(self, k: int) -> float:
        return self.overall["acc"][k]


def embed_one(model: LogoNetModel, image: Tensor) -> np.ndarray:
    """Single-image embedding row [D]; the only path retrieval ever uses."""
    with no_grad():
        return embed(model, Tensor(image.data[None])).data[0]


def build_gallery(model: LogoNetModel, logos, cache=None) -> Gallery:
    if not logos:
        raise ValueError("cannot build a gallery from zero logos")
    cfg = model.config
    ids, rows = [], []
    for logo in logos:
        if logo.instance_id in ids:
            raise ValueError(f"duplicate instance_id {logo.instance_id!r}")
        image = (cache.get(logo.image_path) if cache is not None else
                 decode_image(logo.image_path, cfg.input_channels, cfg.input_size))
        ids.append(logo.instance_id)
        rows.append(embed_one(model, image))
    return Gallery(instance_ids=tuple(ids), embeddings=np.stack(rows),
                   fingerprint=model_fingerprint(model))


def rank(gallery: Gallery, query_embedding, truth_id: Optional[str] = None
         ) -> RankedResult:
    """Full ascending-distance ranking of the gallery for one query."""
    q = query_embedding.data if isinstance(query_embedding, Tensor) \
        else np.asarray(query_embedding)
    if q.ndim != 1 or q.shape[0] != gallery.embeddings.shape[1]:
        raise ValueError(f"query dimension {q.shape} does not match gallery "
                         f"dimension {gallery.embeddings.shape[1]}")
    diff = gallery.embeddings.astype(np.float64) - q.astype(np.float64)
    distances = np.sqrt(np.sum(diff * diff, axis=1))
    order = np.argsort(distances, kind="stable")
    results = tuple((gallery.instance_ids[i], float(distances[i]))
                    for i in order)
    rank_of_truth = None
    if truth_id is not None:
        for position, (iid, _) in enumerate(results, start=1):
            if iid == truth_id:
                rank_of_truth = position
                break
        if rank_of_truth is None:
            raise KeyError(f"truth id {truth_id!r} not in gallery")
    return RankedResult(results=results, rank_of_truth=rank_of_truth)


def acc_at_k(results, k: int) -> float:
    """Fraction of queries whose true instance ranks within the top k."""
    if k < 1:
        raise ValueError(f"k {k} < 1")
    if not results:
        raise ValueError("no ranked results")
    for r in results:
        if r.rank_of_truth is None:
            raise ValueError("ranked result lacks rank_of_truth")
    return sum(1 for r in results if r.rank_of_truth <= k) / len(results)


def _acc_cell(results, ks):
    if not results:
        return {"count": 0, "acc": {}}
    return {"count": len(results),
            "acc": {k: acc_at_k(results, k) for k in ks}}


def evaluate(model: LogoNetModel, manifest, split: str = "test",
             ks=KS, cache=None) -> EvalReport:
    """Each sketch in the split queries the full logo gallery once."""
    queries = manifest.sketches_in(split)
    if not queries:
        raise ValueError(f"split {split!r} has no sketches to evaluate")
    gallery = build_gallery(model, manifest.logos, cache=cache)
    cfg = model.config
    by_subset: dict = {"easy": [], "medium": [], "hard": []}
    everything = []
    for sk in queries:
        image = (cache.get(sk.path) if cache is not None else
                 decode_image(sk.path, cfg.input_channels, cfg.input_size))
        result = rank(gallery, embed_one(model, image), truth_id=sk.instance_id)
        by_subset[sk.subset].append(result)
        everything.append(result)
    return EvalReport(overall=_acc_cell(everything, ks),
                      subsets={s: _acc_cell(rs, ks)
                               for s, rs in by_subset.items()})


def format_report(report: EvalReport) -> str:
    ks = sorted(report.overall["acc"])
    header = "cell,count," + ",".join(f"acc{k}" for k in ks)
    lines = [header]
    rows = [("overall", report.overall)]
    rows += [(name, cell) for name, cell in report.subsets.items()]
    for name, cell in rows:
        if cell["count"] == 0:
            lines.append(f"{name},0," + ",".join([""] * len(ks)))
        else:
            accs = ",".join(f"{cell['acc'][k]:.4f}" for k in ks)
            lines.append(f"{name},{cell['count']},{accs}")
    return "\n".join(lines) + "\n"
