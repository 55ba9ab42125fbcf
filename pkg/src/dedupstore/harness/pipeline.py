"""Pipeline stages over one store directory.

Each stage reads the previous stage's artifacts and writes its own::

    ingest       family.spec, models/model-<m>.npz, validation.npz
    dedup        index.ddix, mappings.txt, dedup.txt
    pack         scheme.txt
    materialize  manifest, pages/
    simulate     simulate-<policy>.txt
    report       report.txt or report.json

Running a stage discards the artifacts of every later stage.
"""

from __future__ import annotations

import json
import logging
import math
import shutil
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from ..errors import FormatError, StoreError
from ..index import DedupIndex, LshConfig, auto_bucket_width
from ..packing import PACKERS, Ownership, PackingScheme
from ..store import PageStore, StoredTensor
from ..tensor import TensorMeta, block_tensor
from .family import (
    ModelFamilySpec,
    ModelOracle,
    accuracy,
    blocked_forward,
    generate_family,
    load_model,
    model_tensors,
    save_model,
    validation_set,
)
from .simulate import WorkloadSpec, simulate

log = logging.getLogger(__name__)

STAGES = ("ingest", "dedup", "pack", "materialize", "simulate", "report")
ARTIFACTS = {
    "ingest": ["family.spec", "models", "validation.npz"],
    "dedup": ["index.ddix", "mappings.txt", "dedup.txt"],
    "pack": ["scheme.txt"],
    "materialize": ["manifest", "pages"],
    "simulate": ["simulate-*.txt"],
    "report": ["report.txt", "report.json"],
}


class MissingArtifactError(StoreError):
    """A stage ran before the stage that produces its inputs."""

    def __init__(self, path: Path, stage: str):
        super().__init__(f"{path} not found; run `dedupstore {stage}` first")
        self.path = path
        self.stage = stage


def _require(store: Path, name: str, stage: str) -> Path:
    path = store / name
    if not path.exists():
        raise MissingArtifactError(path, stage)
    return path


def _invalidate(store: Path, stage: str) -> None:
    for later in STAGES[STAGES.index(stage) + 1 :]:
        for pattern in ARTIFACTS[later]:
            for path in store.glob(pattern):
                if path.is_dir():
                    shutil.rmtree(path)
                else:
                    path.unlink()


def _record_time(store: Path, stage: str, seconds: float) -> None:
    path = store / "timings.txt"
    lines = {}
    if path.exists():
        for line in path.read_text().splitlines():
            key, _, value = line.partition("=")
            lines[key] = value
    lines[stage] = f"{seconds:.6f}"
    path.write_text("".join(f"{k}={v}\n" for k, v in lines.items()))


def load_spec(store: Path) -> ModelFamilySpec:
    return ModelFamilySpec.from_file(_require(store, "family.spec", "ingest"))


def load_family(store: Path, spec: ModelFamilySpec):
    models = []
    for m in range(spec.num_models):
        path = _require(store, f"models/model-{m}.npz", "ingest")
        models.append(load_model(path, spec.num_layers))
    with np.load(_require(store, "validation.npz", "ingest")) as data:
        x, y = data["x"], data["y"]
    return models, x, y


# -- ingest -------------------------------------------------------------------


def ingest(spec_path, store) -> ModelFamilySpec:
    start = time.perf_counter()
    spec = ModelFamilySpec.from_file(spec_path)
    store = Path(store)
    (store / "models").mkdir(parents=True, exist_ok=True)
    _invalidate(store, "ingest")
    family = generate_family(spec)
    for m, model in enumerate(family):
        save_model(store / "models" / f"model-{m}.npz", model)
    x, y = validation_set(spec, family[0])
    with open(store / "validation.npz", "wb") as fh:
        np.savez(fh, x=x, y=y)
    (store / "family.spec").write_text(spec.to_text())
    _record_time(store, "ingest", time.perf_counter() - start)
    return spec


# -- dedup --------------------------------------------------------------------


@dataclass
class ModelDedup:
    model: int
    baseline: float
    final: float
    deduplicated: int
    merged: int
    stopped: bool


def write_mappings(path: Path, spec: ModelFamilySpec, mappings: dict[int, dict]) -> None:
    lines = ["DMAP v1"]
    for m in range(spec.num_models):
        for j in range(spec.num_layers):
            meta = spec.weight_meta(m, j)
            f = mappings[meta.tensor_id]
            ids = " ".join(str(f[idx]) for idx in meta.block_indices())
            lines.append(
                f"TENSOR {meta.tensor_id} model={m} layer={j} "
                f"dims={','.join(map(str, meta.dims))} block={','.join(map(str, meta.block_shape))}"
                f" kind={meta.element_kind}: {ids}"
            )
    path.write_text("\n".join(lines) + "\n")


def read_mappings(path: Path) -> dict[int, StoredTensor]:
    lines = path.read_text().splitlines()
    if not lines or lines[0] != "DMAP v1":
        raise FormatError(f"{path}: bad mappings header")
    out = {}
    for n, line in enumerate(lines[1:], start=2):
        head, sep, body = line.partition(":")
        parts = head.split()
        if not sep or len(parts) != 7 or parts[0] != "TENSOR":
            raise FormatError(f"{path} line {n}: cannot parse {line!r}")
        fields = dict(p.split("=", 1) for p in parts[2:])
        meta = TensorMeta(
            int(parts[1]),
            tuple(int(v) for v in fields["dims"].split(",")),
            tuple(int(v) for v in fields["block"].split(",")),
            fields["kind"],
        )
        ids = [int(v) for v in body.split()]
        if len(ids) != meta.num_blocks:
            raise FormatError(f"{path} line {n}: {len(ids)} ids for {meta.num_blocks} blocks")
        out[meta.tensor_id] = StoredTensor(meta, dict(zip(meta.block_indices(), ids)))
    return out


def dedup(
    store,
    threshold: float = 0.035,
    batch: int = 5,
    strict_rollback: bool = False,
    bucket_width: Optional[float] = None,
    magnitude_mode: str = "quartile",
) -> list[ModelDedup]:
    """Index every model in order; each model's guard compares against its own baseline."""
    start = time.perf_counter()
    store = Path(store)
    spec = load_spec(store)
    models, x, y = load_family(store, spec)
    tensors = [model_tensors(spec, m, model) for m, model in enumerate(models)]
    if bucket_width is None:
        bucket_width = auto_bucket_width([blk for t in tensors[0] for _, blk in t.items()], seed=spec.seed)
    index = DedupIndex(LshConfig(bucket_width, seed=spec.seed), magnitude_mode)
    mappings, summary = {}, []
    for m, model in enumerate(models):
        ids = [t.meta.tensor_id for t in tensors[m]]
        oracle = ModelOracle(ids, model.biases, x, y, spec.activations)
        mapping = index.index_model(tensors[m], oracle, batch, threshold, strict_rollback)
        report = index.last_report
        for t in ids:
            mappings[t] = mapping.f(t)
        summary.append(
            ModelDedup(m, report.baseline_accuracy, oracle(mapping), report.deduplicated,
                       report.merged, report.stopped)
        )
    _invalidate(store, "dedup")
    index.save(store / "index.ddix")
    write_mappings(store / "mappings.txt", spec, mappings)
    lines = [f"distinct={len(index.distinct)} bucket_width={bucket_width!r}"]
    for s in summary:
        lines.append(
            f"MODEL {s.model} baseline={s.baseline!r} final={s.final!r} deduplicated={s.deduplicated}"
            f" merged={s.merged} stopped={int(s.stopped)}"
        )
    (store / "dedup.txt").write_text("\n".join(lines) + "\n")
    _record_time(store, "dedup", time.perf_counter() - start)
    return summary


def read_dedup_summary(store: Path) -> tuple[dict, list[dict]]:
    lines = _require(store, "dedup.txt", "dedup").read_text().splitlines()
    head = dict(p.split("=", 1) for p in lines[0].split())
    models = []
    for line in lines[1:]:
        parts = line.split()
        row = {"model": int(parts[1])}
        row.update(p.split("=", 1) for p in parts[2:])
        models.append(row)
    return head, models


# -- pack ---------------------------------------------------------------------


def ownership_from_mappings(tensors: dict[int, StoredTensor]) -> Ownership:
    return Ownership({t: st.items() for t, st in tensors.items()})


def pack(store, algo: str = "two-stage", capacity: int = 8) -> PackingScheme:
    start = time.perf_counter()
    store = Path(store)
    if algo not in PACKERS:
        raise ValueError(f"unknown packer {algo!r}; expected one of {sorted(PACKERS)}")
    if not 1 <= capacity <= 0xFFFF:
        raise ValueError(f"capacity must lie in [1, 65535], got {capacity}")
    tensors = read_mappings(_require(store, "mappings.txt", "dedup"))
    scheme = PACKERS[algo](ownership_from_mappings(tensors), capacity)
    _invalidate(store, "pack")
    (store / "scheme.txt").write_text(scheme.dumps())
    _record_time(store, "pack", time.perf_counter() - start)
    return scheme


# -- materialize --------------------------------------------------------------


def materialize(store) -> PageStore:
    start = time.perf_counter()
    store = Path(store)
    scheme = PackingScheme.loads(_require(store, "scheme.txt", "pack").read_text())
    tensors = read_mappings(_require(store, "mappings.txt", "dedup"))
    index = DedupIndex.load(_require(store, "index.ddix", "dedup"))
    _invalidate(store, "materialize")
    pages = PageStore(store, scheme.capacity)
    pages.materialize(scheme, dict(enumerate(index.distinct)), tensors)
    _record_time(store, "materialize", time.perf_counter() - start)
    return pages


def open_pages(store: Path) -> PageStore:
    _require(store, "manifest", "materialize")
    return PageStore.open(store)


# -- simulate -----------------------------------------------------------------


def model_pages(pages: PageStore, spec: ModelFamilySpec) -> dict[int, list[int]]:
    """Pages each model scans per request, layer by layer, without repeats."""
    out = {}
    for m in range(spec.num_models):
        seq = []
        for j in range(spec.num_layers):
            seq += pages.catalog[spec.tensor_id(m, j)].pages
        out[m] = list(dict.fromkeys(seq))
    return out


def simulate_stage(store, workload_path, policy: Optional[str] = None, capacity_pages: Optional[int] = None):
    start = time.perf_counter()
    store = Path(store)
    workload = WorkloadSpec.from_file(workload_path)
    spec = load_spec(store)
    pages = open_pages(store)
    if len(workload.rates) != spec.num_models:
        raise ValueError(f"workload lists {len(workload.rates)} rates for {spec.num_models} models")
    policy = policy or workload.policy
    capacity = capacity_pages or workload.capacity_pages
    if capacity is None:
        raise ValueError("no buffer capacity: pass --capacity-pages or set capacity_pages")
    result = simulate(
        model_pages(pages, spec),
        dict(enumerate(workload.rates)),
        workload.ticks,
        capacity,
        policy,
        workload.seed,
        loader=pages.read_page,
    )
    (store / f"simulate-{policy}.txt").write_text(
        f"# policy={policy} capacity={capacity} ticks={workload.ticks}\n" + result.stats.dump()
    )
    _record_time(store, f"simulate-{policy}", time.perf_counter() - start)
    return result


# -- report -------------------------------------------------------------------


def build_report(store, timing: bool = False) -> dict:
    store = Path(store)
    spec = load_spec(store)
    models, x, y = load_family(store, spec)
    pages = open_pages(store)
    l = pages.capacity
    before = sum(math.ceil(e.meta.num_blocks / l) for e in pages.catalog.values())
    after = pages.num_pages
    head, _ = read_dedup_summary(store)
    per_model = []
    for m, model in enumerate(models):
        metas = [spec.weight_meta(m, j) for j in range(spec.num_layers)]
        stored = [block_tensor(pages.read_tensor(meta.tensor_id), meta) for meta in metas]
        original = model_tensors(spec, m, model)
        per_model.append(
            {
                "model": m,
                "accuracy_before": accuracy(blocked_forward(original, model.biases, x, spec.activations), y),
                "accuracy_after": accuracy(blocked_forward(stored, model.biases, x, spec.activations), y),
            }
        )
    hits = {}
    for path in sorted(store.glob("simulate-*.txt")):
        policy = path.stem[len("simulate-") :]
        last = path.read_text().splitlines()[-1]
        hits[policy] = float(last.split("=", 1)[1])
    report = {
        "pages_before": before,
        "pages_after": after,
        "compression_ratio": after / before,
        "distinct_blocks": int(head["distinct"]),
        "capacity": l,
        "models": per_model,
        "hit_ratios": hits,
    }
    if timing and (store / "timings.txt").exists():
        report["timing_seconds"] = {
            k: float(v)
            for k, _, v in (ln.partition("=") for ln in (store / "timings.txt").read_text().splitlines())
        }
    return report


def format_report(report: dict, fmt: str = "text") -> str:
    if fmt == "json":
        return json.dumps(report, indent=2, sort_keys=True) + "\n"
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")
    lines = [
        f"pages_before={report['pages_before']}",
        f"pages_after={report['pages_after']}",
        f"compression_ratio={report['compression_ratio']:.4f}",
        f"distinct_blocks={report['distinct_blocks']}",
        f"capacity={report['capacity']}",
    ]
    for row in report["models"]:
        lines.append(
            f"model={row['model']} accuracy_before={row['accuracy_before']:.4f} "
            f"accuracy_after={row['accuracy_after']:.4f}"
        )
    for policy, ratio in sorted(report["hit_ratios"].items()):
        lines.append(f"policy={policy} hit_ratio={ratio:.4f}")
    for stage, secs in report.get("timing_seconds", {}).items():
        lines.append(f"time {stage}={secs:.3f}s")
    return "\n".join(lines) + "\n"


def report(store, fmt: str = "text", timing: bool = False) -> str:
    store = Path(store)
    text = format_report(build_report(store, timing), fmt)
    (store / f"report.{'json' if fmt == 'json' else 'txt'}").write_text(text)
    return text
