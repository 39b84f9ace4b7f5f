"""Volume prediction, metrics at several granularities, and the ablation harness."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .data.split import SplitManifest, small_lesion_images
from .data.volume import Volume
from .data.windows import iter_windows
from .metrics import ConfusionCounts, MetricValues, confusion, mean_metrics, metrics, threshold
from .model import SpinModel
from .tensor import no_grad

GRANULARITIES = ("image", "volume", "aggregate", "small_lesion_image", "small_lesion_aggregate")


def predict_volume(model: SpinModel, v: Volume, mu: float, order=None) -> tuple[np.ndarray, np.ndarray]:
    """Confidence (C, H, W) float32 and its 0.5-threshold mask.

    Each slice t is predicted from the window centred on t, one window per
    forward pass, so the result does not depend on ``order``.
    """
    C, H, W = v.shape
    conf = np.empty((C, H, W), dtype=np.float32)
    filled = np.zeros(C, dtype=np.int64)
    windows = list(iter_windows(v, model.config.input_slices, mu))
    idx = range(C) if order is None else order
    with no_grad():
        for t in idx:
            w = windows[t]
            out = model(w.x[None])
            conf[w.center_index] = out.f.data[0, 0]
            filled[w.center_index] += 1
    if not (filled == 1).all():
        raise RuntimeError(f"slices not predicted exactly once: {np.nonzero(filled != 1)[0].tolist()}")
    return conf, threshold(conf)


@dataclass
class MetricsReport:
    method: str
    per_image: dict[tuple[str, int], ConfusionCounts]
    small_lesion: list[tuple[str, int]]
    config_text: str = ""
    runtime: dict[str, float] = field(default_factory=dict)

    @property
    def per_volume(self) -> dict[str, ConfusionCounts]:
        out: dict[str, ConfusionCounts] = {}
        for (vid, _), c in sorted(self.per_image.items()):
            out[vid] = out.get(vid, ConfusionCounts()) + c
        return out

    @property
    def aggregate(self) -> ConfusionCounts:
        total = ConfusionCounts()
        for _, c in sorted(self.per_image.items()):
            total = total + c
        return total

    def _small(self) -> list[ConfusionCounts]:
        return [self.per_image[k] for k in self.small_lesion]

    def values(self) -> dict[str, MetricValues]:
        small = self._small()
        small_total = ConfusionCounts()
        for c in small:
            small_total = small_total + c
        return {
            "image": mean_metrics([metrics(c) for _, c in sorted(self.per_image.items())]),
            "volume": mean_metrics([metrics(c) for c in self.per_volume.values()]),
            "aggregate": metrics(self.aggregate),
            "small_lesion_image": mean_metrics([metrics(c) for c in small]),
            "small_lesion_aggregate": metrics(small_total) if small else mean_metrics([]),
        }

    def rows(self) -> list[str]:
        vals = self.values()
        return [
            "\t".join([self.method, g] + [f"{x:.6f}" for x in vals[g].as_tuple()]) for g in GRANULARITIES
        ]

    def summary(self) -> str:
        a = self.aggregate
        s = ConfusionCounts()
        for c in self._small():
            s = s + c
        lines = [
            f"method={self.method}",
            f"images={len(self.per_image)}",
            f"volumes={len(self.per_volume)}",
            f"small_lesion_images={len(self.small_lesion)}",
            f"aggregate_tp={a.tp}",
            f"aggregate_fp={a.fp}",
            f"aggregate_fn={a.fn}",
            f"aggregate_tn={a.tn}",
            f"small_lesion_tp={s.tp}",
            f"small_lesion_fp={s.fp}",
            f"small_lesion_fn={s.fn}",
        ]
        for g, m in self.values().items():
            for k, x in zip(("dsc", "iou", "precision", "recall"), m.as_tuple()):
                lines.append(f"{g}_{k}={x:.6f}")
        return "\n".join(lines)

    def to_text(self) -> str:
        """Tab-separated table, then a key=value summary and the config echo.

        Runtime measurements are kept out so the text is reproducible."""
        out = [HEADER, *self.rows(), "", "[summary]", self.summary()]
        if self.config_text:
            out += ["", "[config]", self.config_text.rstrip("\n")]
        return "\n".join(out) + "\n"


HEADER = "\t".join(("method", "granularity", "dsc", "iou", "precision", "recall"))


def format_table(reports: list[MetricsReport]) -> str:
    lines = [HEADER]
    for r in reports:
        lines += r.rows()
    return "\n".join(lines) + "\n"


def evaluate_predictions(
    method: str,
    predictions: dict[str, np.ndarray],
    volumes: dict[str, Volume],
    small_lesion: list[tuple[str, int]],
    config_text: str = "",
) -> MetricsReport:
    per_image = {}
    for vid in sorted(predictions):
        v = volumes[vid]
        pred = predictions[vid]
        if pred.shape != v.shape:
            raise ValueError(f"{vid}: prediction shape {pred.shape} != volume shape {v.shape}")
        gt = v.labels if v.labels is not None else np.zeros(v.shape, np.uint8)
        for t in range(v.num_slices):
            per_image[(vid, t)] = confusion(pred[t], gt[t])
    small = [k for k in small_lesion if k in per_image]
    return MetricsReport(method, per_image, small, config_text)


def _lookup(manifest_ids, volumes) -> dict[str, Volume]:
    by_id = {v.id: v for v in volumes}
    missing = [i for i in manifest_ids if i not in by_id]
    if missing:
        raise KeyError(f"volumes missing from dataset: {', '.join(missing)}")
    return {i: by_id[i] for i in manifest_ids}


def evaluate(
    model: SpinModel,
    manifest: SplitManifest,
    volumes: list[Volume],
    mu: float,
    method: str = "spin",
    config_text: str = "",
) -> MetricsReport:
    test = _lookup(manifest.test_ids, volumes)
    t0 = time.perf_counter()
    preds = {vid: predict_volume(model, v, mu)[1] for vid, v in test.items()}
    elapsed = time.perf_counter() - t0
    report = evaluate_predictions(method, preds, test, manifest.small_lesion_images, config_text)
    n = sum(v.num_slices for v in test.values())
    report.runtime = {"predict_seconds": elapsed, "seconds_per_image": elapsed / max(n, 1)}
    return report


# Arms ordered from the plain U-Net baseline up to the full model.
ABLATION_ARMS: tuple[tuple[str, dict], ...] = (
    ("baseline", {"guidance_mode": "none", "downsampler_mode": "bilinear"}),
    ("no_spg", {"guidance_mode": "none", "downsampler_mode": "learnable"}),
    ("bilinear_guidance", {"guidance_mode": "bilinear_input", "downsampler_mode": "learnable"}),
    ("nearest_guidance", {"guidance_mode": "nearest_input", "downsampler_mode": "learnable"}),
    ("bilinear_downsample", {"guidance_mode": "spg", "downsampler_mode": "bilinear"}),
    ("full_soft_dice", {"guidance_mode": "spg", "downsampler_mode": "learnable", "loss": "soft_dice"}),
    ("full", {"guidance_mode": "spg", "downsampler_mode": "learnable"}),
)


def ablation_config(base: TrainConfig, arm: str) -> TrainConfig:
    overrides = dict(ABLATION_ARMS)[arm]
    kw = {"loss": "bce", **overrides}
    return base.with_(**kw)


def run_ablation(
    volumes: list[Volume],
    manifest: SplitManifest,
    base_cfg: TrainConfig,
    arms=None,
    on_arm=None,
) -> list[MetricsReport]:
    """Train and evaluate each arm on the same data and seed."""
    from .train import train

    names = [a for a, _ in ABLATION_ARMS] if arms is None else list(arms)
    known = {a for a, _ in ABLATION_ARMS}
    bad = [a for a in names if a not in known]
    if bad:
        raise ValueError(f"unknown ablation arms {bad}")
    order = [a for a, _ in ABLATION_ARMS if a in names]
    train_vols = list(_lookup(manifest.train_ids, volumes).values())
    reports = []
    for arm in order:
        cfg = ablation_config(base_cfg, arm)
        t0 = time.perf_counter()
        res = train(train_vols, cfg)
        rep = evaluate(res.model, manifest, volumes, res.mu, method=arm, config_text=cfg.to_text())
        rep.runtime["train_seconds"] = time.perf_counter() - t0
        rep.runtime["parameters"] = float(res.model.count_parameters()["total"])
        reports.append(rep)
        if on_arm is not None:
            on_arm(arm, rep)
    return reports


__all__ = [
    "ABLATION_ARMS",
    "GRANULARITIES",
    "MetricsReport",
    "ablation_config",
    "evaluate",
    "evaluate_predictions",
    "format_table",
    "predict_volume",
    "run_ablation",
    "small_lesion_images",
]
