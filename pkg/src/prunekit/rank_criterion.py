"""Feature-map rank importance and per-layer keep/prune plans.

Each conv filter is scored by the numerical rank of the 2-D map it
produces, averaged over a calibration batch. Within a layer the filters
with the highest average rank are kept; the rest are pruned.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from prunekit import engine
from prunekit._backend import thread_cap
from prunekit.errors import CalibrationError, NonPrunableLayerError, PlanError, ZeroChannelError
from prunekit.model_ir import ModelGraph, reference_layers
from prunekit.tensor_core import DEFAULT_RANK_TOL, matrix_rank_batch

log = logging.getLogger(__name__)

REPORT_SCHEMA = 1
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".tif", ".tiff")

# keep ratios, in layer order
PUBLISHED_BACKBONE = (0.792, 0.875, 0.878, 0.870, 1.0)
PUBLISHED_HEAD_CLS = (0.898, 0.539, 0.875)
PUBLISHED_HEAD_REG = (0.887, 0.566, 0.875)


@dataclass(frozen=True)
class CalibrationConfig:
    batch_size: int = 16
    rel_tol: float = DEFAULT_RANK_TOL
    seed: int = 0
    input_source: str = "synthetic-noise"
    image_folder: str | None = None
    post_activation: bool = False
    threads: int | None = None
    input_hw: tuple[int, int] | None = None  # plain (non-Siamese) models only

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("calibration batch size must be at least 1")
        if not 0 < self.rel_tol < 1:
            raise ValueError("rel_tol must lie in (0, 1)")
        if self.input_source not in ("synthetic-noise", "image-folder"):
            raise ValueError(f"unknown input source {self.input_source!r}")


@dataclass(frozen=True)
class RankReport:
    ranks: Mapping[str, np.ndarray]
    g: int
    rel_tol: float
    prunable: frozenset = field(default_factory=frozenset)
    post_activation: bool = False

    def order(self, lid: str) -> np.ndarray:
        """Filter indices by non-increasing average rank, lower index first on ties."""
        return np.argsort(-np.asarray(self.ranks[lid]), kind="stable")

    @property
    def layers(self) -> list[str]:
        return list(self.ranks)


@dataclass(frozen=True)
class PrunePlan:
    """Keep masks (True = keep) for every prunable conv layer."""

    masks: Mapping[str, np.ndarray]

    def n_kept(self, lid: str) -> int:
        return int(np.count_nonzero(self.masks[lid]))

    def n_pruned(self, lid: str) -> int:
        return int(self.masks[lid].size - self.n_kept(lid))

    def kept(self, lid: str) -> np.ndarray:
        return np.flatnonzero(self.masks[lid])

    def is_identity(self) -> bool:
        return all(bool(m.all()) for m in self.masks.values())

    def to_json(self) -> dict:
        return {lid: {"n": int(m.size), "keep": [int(i) for i in self.kept(lid)]} for lid, m in self.masks.items()}

    @classmethod
    def from_json(cls, data: Mapping) -> "PrunePlan":
        masks = {}
        for lid, rec in data.items():
            m = np.zeros(int(rec["n"]), dtype=bool)
            m[list(rec["keep"])] = True
            masks[lid] = m
        return cls(masks)

    @classmethod
    def keep_all(cls, model: ModelGraph) -> "PrunePlan":
        return cls({lid: np.ones(model.layer(lid).out_channels, bool) for lid in model.prunable_ids})


# ---------------------------------------------------------------------------
# calibration inputs


def _synthetic_inputs(model: ModelGraph, cfg: CalibrationConfig):
    rng = np.random.default_rng(cfg.seed)
    if model.is_siamese:
        z, x = model.meta.template_size, model.meta.search_size
        return [
            (rng.random((1, 3, z, z), dtype=np.float32), rng.random((1, 3, x, x), dtype=np.float32))
            for _ in range(cfg.batch_size)
        ]
    if cfg.input_hw is None:
        raise CalibrationError("plain models need CalibrationConfig.input_hw")
    c = model.layers[0].in_channels
    return [rng.random((1, c, *cfg.input_hw), dtype=np.float32) for _ in range(cfg.batch_size)]


def _load_image(path: Path, size: int, crop: float = 1.0) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB")
        w, h = im.size
        side = min(w, h) * crop
        left, top = (w - side) / 2, (h - side) / 2
        im = im.resize((size, size), Image.BILINEAR, box=(left, top, left + side, top + side))
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)[None].copy()


def _folder_inputs(model: ModelGraph, cfg: CalibrationConfig):
    folder = Path(cfg.image_folder or "")
    if not cfg.image_folder or not folder.is_dir():
        raise CalibrationError(f"image folder {cfg.image_folder!r} does not exist")
    files = sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise CalibrationError(f"no images found in {folder}")
    if len(files) < cfg.batch_size:
        log.warning("only %d images in %s, calibrating on all of them", len(files), folder)
    files = files[: cfg.batch_size]
    out = []
    for f in files:
        try:
            if model.is_siamese:
                # template: central half of the frame, search: the whole frame
                out.append((_load_image(f, model.meta.template_size, 0.5), _load_image(f, model.meta.search_size)))
            else:
                if cfg.input_hw is None or cfg.input_hw[0] != cfg.input_hw[1]:
                    raise CalibrationError("image-folder calibration of plain models needs square input_hw")
                out.append(_load_image(f, cfg.input_hw[0]))
        except (OSError, ValueError) as e:
            raise CalibrationError(f"cannot read calibration image {f}: {e}") from None
    return out


def calibration_inputs(model: ModelGraph, cfg: CalibrationConfig):
    if cfg.input_source == "image-folder":
        return _folder_inputs(model, cfg)
    return _synthetic_inputs(model, cfg)


# ---------------------------------------------------------------------------
# ranks


def feature_map_ranks(model: ModelGraph, inputs, layer_ids, rel_tol=DEFAULT_RANK_TOL, post_activation=False):
    """Integer rank of every filter's map for one calibration input."""
    taps = engine.forward_with_taps(model, inputs, layer_ids, post_activation)
    return {lid: matrix_rank_batch(taps[lid][0], rel_tol) for lid in layer_ids}


def calibrate_ranks(model: ModelGraph, cfg: CalibrationConfig = CalibrationConfig(), layer_ids=None) -> RankReport:
    """Average feature-map rank per filter over the calibration batch."""
    layer_ids = list(model.conv_ids if layer_ids is None else layer_ids)
    inputs = calibration_inputs(model, cfg)
    workers = min(thread_cap(cfg.threads), len(inputs))

    def one(item):
        return feature_map_ranks(model, item, layer_ids, cfg.rel_tol, cfg.post_activation)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_image = list(pool.map(one, inputs))
    else:
        per_image = [one(item) for item in inputs]

    g = len(per_image)
    ranks = {}
    for lid in layer_ids:
        total = np.zeros(model.layer(lid).out_channels, dtype=np.int64)
        for r in per_image:  # fixed order, integer sums
            total += r[lid]
        ranks[lid] = total / g
    prunable = frozenset(lid for lid in layer_ids if model.layer(lid).prunable)
    return RankReport(ranks, g, cfg.rel_tol, prunable, cfg.post_activation)


def write_report(report: RankReport, path) -> Path:
    path = Path(path)
    lines = [
        "# prunekit rank report",
        f"# schema_version={REPORT_SCHEMA}",
        f"# g={report.g}",
        f"# rel_tol={report.rel_tol!r}",
        f"# taps={'post' if report.post_activation else 'pre'}-activation",
        "layer,filter,avg_rank,prunable",
    ]
    for lid, r in report.ranks.items():
        flag = int(lid in report.prunable)
        lines.extend(f"{lid},{j},{float(v)!r},{flag}" for j, v in enumerate(r))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_report(path) -> RankReport:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"rank report {path} not found")
    header, rows = {}, []
    for line in path.read_text().splitlines():
        if line.startswith("#"):
            if "=" in line:
                k, v = line[1:].strip().split("=", 1)
                header[k] = v
        elif line and not line.startswith("layer,"):
            rows.append(line.split(","))
    if int(header.get("schema_version", -1)) != REPORT_SCHEMA:
        raise ValueError(f"{path}: unsupported rank report schema {header.get('schema_version')!r}")
    ranks: dict[str, list] = {}
    prunable = set()
    for lid, j, v, flag in rows:
        lst = ranks.setdefault(lid, [])
        if int(j) != len(lst):
            raise ValueError(f"{path}: filters of {lid} out of order at index {j}")
        lst.append(float(v))
        if flag == "1":
            prunable.add(lid)
    return RankReport(
        {k: np.array(v) for k, v in ranks.items()},
        int(header["g"]),
        float(header["rel_tol"]),
        frozenset(prunable),
        header.get("taps", "pre-activation").startswith("post"),
    )


# ---------------------------------------------------------------------------
# plans


def keep_count(keep_ratio: float, n: int) -> int:
    """round-half-up of keep_ratio * n, capped at n."""
    return min(n, int(math.floor(keep_ratio * n + 0.5 + 1e-9)))


def make_plan(report: RankReport, ratios: Mapping[str, float]) -> PrunePlan:
    """Keep the ``round(ratio * n)`` highest-ranked filters of every prunable layer."""
    for lid in ratios:
        if lid not in report.ranks:
            raise PlanError(f"ratio given for unknown layer {lid!r}")
    masks = {}
    for lid, r in report.ranks.items():
        if lid not in report.prunable:
            if lid in ratios and ratios[lid] != 1.0:
                raise NonPrunableLayerError(f"layer {lid} is not prunable (keep ratio {ratios[lid]})")
            continue
        if lid not in ratios:
            raise PlanError(f"no keep ratio for prunable layer {lid!r}")
        ratio = float(ratios[lid])
        if not 0 < ratio <= 1:
            raise PlanError(f"keep ratio for {lid} must lie in (0, 1], got {ratio}")
        n = len(r)
        keep = keep_count(ratio, n)
        if keep < 1:
            raise ZeroChannelError(f"keep ratio {ratio} leaves layer {lid} ({n} filters) empty")
        mask = np.zeros(n, dtype=bool)
        mask[report.order(lid)[:keep]] = True
        masks[lid] = mask
    return PrunePlan(masks)


def plan_objective(report: RankReport, plan: PrunePlan) -> float:
    """Summed average rank of the pruned filters (the quantity being minimised)."""
    return math.fsum(float(v) for lid, m in plan.masks.items() for v in np.asarray(report.ranks[lid])[~m])


def is_reference_model(model: ModelGraph) -> bool:
    want = [(l.id, l.kind, l.section, l.branch, l.prunable) for l in reference_layers(1.0)]
    have = [(l.id, l.kind, l.section, l.branch, l.prunable) for l in model.layers]
    return want == have


def paper_preset_ratios(model: ModelGraph) -> dict[str, float]:
    """Per-layer keep ratios of the published configuration."""
    if not is_reference_model(model):
        raise PlanError("the published preset only applies to the reference architecture")
    ratios = {f"backbone.conv{i}": r for i, r in enumerate(PUBLISHED_BACKBONE, start=1)}
    ratios.update({f"head_cls.conv{i}": r for i, r in enumerate(PUBLISHED_HEAD_CLS, start=1)})
    ratios.update({f"head_reg.conv{i}": r for i, r in enumerate(PUBLISHED_HEAD_REG, start=1)})
    ratios.update({l.id: 1.0 for l in model.layers if l.section == "neck"})
    return ratios


def keep_from_prune(prune_ratios: Mapping[str, float]) -> dict[str, float]:
    return {lid: 1.0 - float(p) for lid, p in prune_ratios.items()}


def uniform_ratios(model: ModelGraph, keep: float = 1.0, overrides: Mapping[str, float] | None = None):
    ratios = {lid: keep for lid in model.prunable_ids}
    ratios.update(overrides or {})
    return ratios
