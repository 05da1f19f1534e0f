"""Synthetic place-recognition data, exact retrieval, Recall@k and sweeps.

Each place is a smooth random pattern (a sum of low-frequency periodic
waves). References are the clean pattern; queries add a circular pixel
shift, a brightness gain and Gaussian noise. Ground truth is by place id.
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .config import SyntheticDatasetConfig
from .errors import BadMagicError, DataError, LoadError, TruncatedError, UsageError, VersionMismatchError
from .kernels import count_model_ops, macs_to_tops
from .model import VitModel, cls_descriptors, forward_batch
from .modelio import read_records, serialize_model
from .tensor import Prng

__all__ = [
    "DescriptorIndex",
    "EvalResult",
    "ImageSet",
    "MemoryReport",
    "SyntheticDataset",
    "build_index",
    "extract_descriptors",
    "gen_synthetic_dataset",
    "load_dataset",
    "load_descriptor_db",
    "memory_report",
    "read_timg",
    "recall_at_k",
    "save_dataset",
    "save_descriptor_db",
    "search",
    "search_batch",
    "sweep",
    "write_sweep_csv",
    "write_timg",
]

_MAX_FREQ = 3


@dataclass
class ImageSet:
    images: np.ndarray      # (n, H, W, C) float32
    place_ids: np.ndarray   # (n,) int
    image_ids: np.ndarray   # (n,) int

    def __len__(self) -> int:
        return len(self.image_ids)

    @staticmethod
    def concat(*sets: ImageSet) -> ImageSet:
        return ImageSet(
            np.concatenate([s.images for s in sets]),
            np.concatenate([s.place_ids for s in sets]),
            np.concatenate([s.image_ids for s in sets]),
        )


class SyntheticDataset(NamedTuple):
    references: ImageSet
    queries: ImageSet
    ground_truth: dict[int, list[int]]  # query image id -> reference image ids


def _place_pattern(prng: Prng, h: int, w: int, c: int) -> np.ndarray:
    freqs = np.arange(-_MAX_FREQ, _MAX_FREQ + 1)
    fy, fx = np.meshgrid(freqs, freqs, indexing="ij")
    keep = (fy > 0) | ((fy == 0) & (fx > 0))  # one of each +/- frequency pair
    fy, fx = fy[keep], fx[keep]
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    out = np.empty((h, w, c))
    for ch in range(c):
        amp = prng.normal(fy.size) / np.sqrt(1.0 + fy**2 + fx**2)
        phase = prng.uniform_range(0.0, 2 * np.pi, fy.size)
        arg = 2 * np.pi * (fy[:, None, None] * yy + fx[:, None, None] * xx) + phase[:, None, None]
        field_ = (amp[:, None, None] * np.cos(arg)).sum(axis=0)
        out[..., ch] = (field_ - field_.mean()) / field_.std()
    return out


def _perturb(base: np.ndarray, prng: Prng, cfg: SyntheticDatasetConfig) -> np.ndarray:
    dy, dx = (int(v) for v in prng.integers(-cfg.max_shift_px, cfg.max_shift_px + 1, 2))
    gain = 1.0 + cfg.brightness_jitter * (2.0 * prng.uniform(1)[0] - 1.0)
    noise = cfg.noise_std * prng.normal(base.size).reshape(base.shape)
    return np.roll(base, (dy, dx), axis=(0, 1)) * gain + noise


def gen_synthetic_dataset(cfg: SyntheticDatasetConfig, seed: int | None = None) -> SyntheticDataset:
    """Deterministic dataset; ``seed`` falls back to ``cfg.seed`` then 0."""
    seed = seed if seed is not None else (cfg.seed or 0)
    root = Prng(seed).derive("dataset")
    h, w, c = cfg.image
    refs, queries = [], []
    for place in range(cfg.num_places):
        base = _place_pattern(root.derive("place", place), h, w, c)
        refs.append(base)
        queries.append([_perturb(base, root.derive("query", place, q), cfg)
                        for q in range(cfg.queries_per_place)])
    n_ref = cfg.num_places * cfg.refs_per_place
    ref_images = np.stack([refs[p] for p in range(cfg.num_places) for _ in range(cfg.refs_per_place)])
    ref_places = np.repeat(np.arange(cfg.num_places), cfg.refs_per_place)
    q_images = np.stack([q for qs in queries for q in qs])
    q_places = np.repeat(np.arange(cfg.num_places), cfg.queries_per_place)
    references = ImageSet(ref_images.astype(np.float32), ref_places, np.arange(n_ref))
    query_set = ImageSet(q_images.astype(np.float32), q_places, n_ref + np.arange(len(q_places)))
    by_place = {p: [int(i) for i in references.image_ids[ref_places == p]] for p in range(cfg.num_places)}
    gt = {int(qid): by_place[int(p)] for qid, p in zip(query_set.image_ids, q_places)}
    return SyntheticDataset(references, query_set, gt)


# -- on-disk formats -------------------------------------------------------

_TIMG = b"TIMG"
_TDSC = b"TDSC"


def write_timg(path, image: np.ndarray) -> None:
    h, w, c = image.shape
    with open(path, "wb") as fh:
        fh.write(_TIMG + struct.pack("<4I", 1, h, w, c))
        fh.write(np.ascontiguousarray(image, dtype="<f4").tobytes())


def read_timg(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != _TIMG:
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}, expected {_TIMG!r}")
    if len(data) < 20:
        raise TruncatedError(f"{path}: truncated header")
    version, h, w, c = struct.unpack_from("<4I", data, 4)
    if version != 1:
        raise VersionMismatchError(f"{path}: unsupported image version {version}")
    if len(data) != 20 + 4 * h * w * c:
        raise TruncatedError(f"{path}: expected {20 + 4 * h * w * c} bytes, got {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=20).astype(np.float32).reshape(h, w, c)


def save_dataset(ds: SyntheticDataset, out_dir, cfg: SyntheticDatasetConfig | None = None) -> Path:
    """One directory per place plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    places = {}
    for role, images in (("ref", ds.references), ("query", ds.queries)):
        for img, pid, iid in zip(images.images, images.place_ids, images.image_ids):
            pdir = f"place_{int(pid):04d}"
            (out / pdir).mkdir(exist_ok=True)
            fname = f"{role}_{int(iid):06d}.timg"
            write_timg(out / pdir / fname, img)
            places.setdefault(int(pid), []).append({"image_id": int(iid), "role": role, "file": fname})
    manifest = {
        "format": "synthetic-places",
        "version": 1,
        "config": asdict(cfg) if cfg is not None else None,
        "places": [{"place_id": p, "dir": f"place_{p:04d}", "images": places[p]} for p in sorted(places)],
        "ground_truth": {str(q): refs for q, refs in sorted(ds.ground_truth.items())},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return out


def load_dataset(data_dir) -> SyntheticDataset:
    root = Path(data_dir)
    try:
        manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise LoadError(f"{root / 'manifest.json'}: invalid JSON ({exc})") from exc
    parts = {"ref": ([], [], []), "query": ([], [], [])}
    try:
        for place in manifest["places"]:
            for entry in place["images"]:
                imgs, pids, iids = parts[entry["role"]]
                imgs.append(read_timg(root / place["dir"] / entry["file"]))
                pids.append(int(place["place_id"]))
                iids.append(int(entry["image_id"]))
        gt = {int(q): [int(r) for r in refs] for q, refs in manifest["ground_truth"].items()}
    except (KeyError, TypeError) as exc:
        raise LoadError(f"{root}: malformed manifest ({exc!r})") from exc

    def build(role):
        imgs, pids, iids = parts[role]
        order = np.argsort(iids, kind="stable")
        return ImageSet(np.stack(imgs)[order], np.array(pids)[order], np.array(iids)[order])

    if not parts["ref"][0] or not parts["query"][0]:
        raise LoadError(f"{root}: dataset needs both reference and query images")
    return SyntheticDataset(build("ref"), build("query"), gt)


def save_descriptor_db(path, index: DescriptorIndex) -> None:
    n, d = index.matrix.shape
    buf = io.BytesIO()
    buf.write(_TDSC + struct.pack("<2I", n, d))
    for (pid, iid), row in zip(index.ids, index.matrix):
        buf.write(struct.pack("<2I", pid, iid))
        buf.write(np.ascontiguousarray(row, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_descriptor_db(path) -> DescriptorIndex:
    data = Path(path).read_bytes()
    if data[:4] != _TDSC:
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}, expected {_TDSC!r}")
    if len(data) < 12:
        raise TruncatedError(f"{path}: truncated header")
    n, d = struct.unpack_from("<2I", data, 4)
    row = 8 + 4 * d
    if len(data) != 12 + n * row:
        raise TruncatedError(f"{path}: expected {12 + n * row} bytes, got {len(data)}")
    ids, rows = [], []
    for i in range(n):
        off = 12 + i * row
        ids.append(struct.unpack_from("<2I", data, off))
        rows.append(np.frombuffer(data, dtype="<f4", count=d, offset=off + 8))
    matrix = np.stack(rows).astype(np.float32) if rows else np.zeros((0, d), np.float32)
    return DescriptorIndex(ids=[tuple(int(v) for v in i) for i in ids], matrix=matrix)


# -- retrieval -------------------------------------------------------------

@dataclass
class DescriptorIndex:
    ids: list[tuple[int, int]]   # (place id, image id) per row
    matrix: np.ndarray           # (n, D) unit-norm rows

    def __post_init__(self):
        if len(self.ids) != len(self.matrix):
            raise DataError(f"{len(self.ids)} ids for {len(self.matrix)} descriptor rows")
        if len(self.matrix):
            norms = np.linalg.norm(self.matrix.astype(np.float64), axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-5):
                raise DataError("index rows must be unit-norm")

    def __len__(self) -> int:
        return len(self.ids)


def build_index(descriptors, ids) -> DescriptorIndex:
    matrix = np.stack([getattr(d, "values", d) for d in descriptors]) if len(descriptors) else np.zeros((0, 0))
    return DescriptorIndex(ids=[tuple(int(v) for v in i) for i in ids], matrix=matrix.astype(np.float32))


def search_batch(index: DescriptorIndex, queries: np.ndarray, top_k: int) -> np.ndarray:
    """Row indices of the ``top_k`` most similar entries for each query."""
    if len(index) == 0:
        raise UsageError("cannot search an empty index")
    if not 1 <= top_k <= len(index):
        raise UsageError(f"top_k must be in [1, {len(index)}], got {top_k}")
    sims = np.asarray(queries, dtype=np.float64) @ index.matrix.astype(np.float64).T
    order = np.argsort(-sims, axis=1, kind="stable")
    return order[:, :top_k]


def search(index: DescriptorIndex, q, top_k: int) -> list[tuple[int, int]]:
    """Ranked ids by descending cosine similarity; ties keep insertion order."""
    q = np.asarray(getattr(q, "values", q))
    rows = search_batch(index, q[None, :], top_k)[0]
    return [index.ids[i] for i in rows]


def recall_at_k(rankings, ground_truth, k: int) -> float:
    """Fraction of queries with a correct reference in their top ``k``.

    ``rankings`` maps query id to ranked reference image ids.
    """
    if not rankings:
        raise DataError("no queries to evaluate")
    hits = 0
    for qid, ranked in rankings.items():
        if qid not in ground_truth or not ground_truth[qid]:
            raise DataError(f"query {qid} has no ground-truth reference")
        correct = set(ground_truth[qid])
        hits += any(r in correct for r in list(ranked)[:k])
    return hits / len(rankings)


def extract_descriptors(model: VitModel, images: np.ndarray, s: float = 0.0,
                        threads: int = 1, chunk: int = 32) -> np.ndarray:
    """CLS descriptors for ``images`` in fixed-size chunks.

    Chunking is independent of ``threads``, so results are identical for any
    worker count.
    """
    starts = range(0, len(images), chunk)

    def run(i):
        tokens, _ = forward_batch(model, images[i:i + chunk], s)
        return cls_descriptors(tokens)

    if threads <= 1:
        parts = [run(i) for i in starts]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, starts))
    return np.concatenate(parts).astype(np.float32)


@dataclass
class EvalResult:
    sparsity: float
    recall_at: dict[int, float]
    macs_per_query: int
    tops_per_query: float
    model_bytes: int

    @property
    def recall1_per_mb(self) -> float:
        return self.recall_at[1] / (self.model_bytes / 1e6)


SWEEP_COLUMNS = ("sparsity", "recall_at_1", "recall_at_5", "recall_at_10",
                 "macs_per_query", "tops_per_query", "model_bytes", "recall1_per_mb")


def sweep(model: VitModel, dataset: SyntheticDataset, sparsity_levels, ks=(1, 5, 10),
          threads: int = 1, model_bytes: int | None = None) -> list[EvalResult]:
    """Recall@k, per-query MACs and model size at each sparsity level."""
    if model_bytes is None:
        model_bytes = len(serialize_model(model))
    refs, queries, gt = dataset
    results = []
    for s in sparsity_levels:
        index = build_index(
            extract_descriptors(model, refs.images, s, threads),
            list(zip(refs.place_ids, refs.image_ids)),
        )
        q_desc = extract_descriptors(model, queries.images, s, threads)
        top = search_batch(index, q_desc, min(max(ks), len(index)))
        rankings = {int(qid): [index.ids[j][1] for j in row] for qid, row in zip(queries.image_ids, top)}
        macs = count_model_ops(model.config, s)
        results.append(EvalResult(
            sparsity=float(s),
            recall_at={k: recall_at_k(rankings, gt, k) for k in ks},
            macs_per_query=macs,
            tops_per_query=macs_to_tops(macs),
            model_bytes=int(model_bytes),
        ))
    return results


def write_sweep_csv(results, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_COLUMNS)
        for r in results:
            writer.writerow([
                f"{r.sparsity:.4f}",
                *(f"{r.recall_at.get(k, float('nan')):.6f}" for k in (1, 5, 10)),
                r.macs_per_query,
                f"{r.tops_per_query:.6g}",
                r.model_bytes,
                f"{r.recall1_per_mb:.6g}",
            ])


# -- memory ----------------------------------------------------------------

@dataclass
class MemoryReport:
    student_rows: list = field(default_factory=list)    # TensorRecord
    baseline_rows: list = field(default_factory=list)
    student_bytes: int = 0
    baseline_bytes: int = 0

    @property
    def ratio(self) -> float:
        return self.baseline_bytes / self.student_bytes

    def format(self) -> str:
        base = {r.name: r for r in self.baseline_rows}
        lines = [f"{'tensor':<28} {'dtype':<8} {'shape':<12} {'bytes':>9} {'baseline':>9}"]
        for r in self.student_rows:
            b = base.get(r.name)
            dtype = {0: "f32", 1: "ternary", 2: "state"}[r.dtype]
            shape = "x".join(map(str, r.shape))
            lines.append(f"{r.name:<28} {dtype:<8} {shape:<12} {r.total_bytes:>9} "
                         f"{b.total_bytes if b else '-':>9}")
        lines.append(f"{'total (file)':<50} {self.student_bytes:>9} {self.baseline_bytes:>9}")
        lines.append(f"ratio baseline/student: {self.ratio:.3f}")
        return "\n".join(lines)


def memory_report(model_path: str | os.PathLike, baseline_model_path: str | os.PathLike) -> MemoryReport:
    student = Path(model_path).read_bytes()
    baseline = Path(baseline_model_path).read_bytes()
    _, s_rows = read_records(student)
    _, b_rows = read_records(baseline)
    return MemoryReport(s_rows, b_rows, len(student), len(baseline))
