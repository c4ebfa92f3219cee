"""End-to-end synthetic experiment: synth -> fuse -> train -> infer -> eval.

Produces one report comparing mapped source predictions used directly
("no adapt"), training on single-source pseudo-labels, and training on
consensus pseudo-labels from every larger source subset.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import toynet
from .fusion import fuse_directory
from .metrics import ConfusionMatrix, format_machine_report, format_report, summarize
from .synth import SceneSpec, SourceSimSpec, default_sources, gen_dataset
from .taxonomy import Config, apply_mapping, load_config
from .tensor_io import read_image, read_labelmap, write_labelmap

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    seed: int = 0
    n_train: int = 60
    n_test: int = 12
    size: int = 64
    epochs: int = 20
    batch_size: int = 8
    lr: float = 0.0005
    weights_mode: str = "none"
    hidden: int = 16
    target: str = "greenhouse"

    def __post_init__(self):
        if min(self.n_train, self.n_test, self.size) < 1:
            raise ValueError("train/test counts and image size must be >= 1")
        self.train_config()  # validates the training fields

    def train_config(self) -> toynet.TrainConfig:
        return toynet.TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, seed=self.seed,
            weights_mode=self.weights_mode, hidden=self.hidden,
        )


@dataclass
class Row:
    label: str
    ious: list[float]
    miou: float
    kind: str  # "no-adapt" | "trained"
    sources: tuple[str, ...]


@dataclass
class PipelineResult:
    rows: list[Row]
    class_names: list[str]
    report: str
    logs: dict[str, list[str]] = field(default_factory=dict)

    def best(self, kind: str, n_sources: int | None = None) -> Row:
        rows = [r for r in self.rows if r.kind == kind and (n_sources is None or len(r.sources) == n_sources)]
        return max(rows, key=lambda r: r.miou)


def source_subsets(names: Sequence[str]) -> list[tuple[str, ...]]:
    """All non-empty subsets, singles first, in source order."""
    return [c for k in range(1, len(names) + 1) for c in itertools.combinations(names, k)]


def evaluate_dirs(gt_paths, pred_paths, n_classes, eval_classes, mapping=None) -> tuple[list[float], float]:
    cm = ConfusionMatrix(n_classes)
    for g, p in zip(gt_paths, pred_paths):
        pred = read_labelmap(p)
        if mapping is not None:
            pred = apply_mapping(mapping, pred)
        cm.accumulate(read_labelmap(g), pred)
    return summarize(cm, eval_classes)


def run_pipeline(
    out_dir,
    cfg: PipelineConfig | None = None,
    config: Config | None = None,
    sources: Sequence[SourceSimSpec] | None = None,
) -> PipelineResult:
    cfg = cfg or PipelineConfig()
    config = config or load_config()
    sources = list(sources or default_sources(config))
    out_dir = Path(out_dir)
    target = config.taxonomy(cfg.target)
    other = set(target.ids_named("other"))
    eval_classes = [c for c in range(len(target)) if c not in other]
    class_names = [target.classes[c] for c in eval_classes]
    short = {s.taxonomy: s.short_name or s.taxonomy for s in sources}

    data = out_dir / "data"
    scene = SceneSpec(width=cfg.size, height=cfg.size, seed=cfg.seed)
    manifest = gen_dataset(scene, sources, cfg.n_train, cfg.n_test, data)
    train_entries, test_entries = manifest.split("train"), manifest.split("test")
    test_gt = [data / e.gt for e in test_entries]
    train_images = [read_image(data / e.image) for e in train_entries]
    test_images = [read_image(data / e.image) for e in test_entries]

    rows = []
    for src in sources:
        preds = [data / e.sources[src.taxonomy] for e in test_entries]
        mapping = config.mapping(src.taxonomy, cfg.target)
        ious, m = evaluate_dirs(test_gt, preds, len(target), eval_classes, mapping)
        rows.append(Row(f"{short[src.taxonomy]} (no adapt)", ious, m, "no-adapt", (src.taxonomy,)))

    logs = {}
    for subset in source_subsets([s.taxonomy for s in sources]):
        label = "+".join(short[n] for n in subset)
        pseudo_dir = out_dir / "pseudo" / label
        fuse_directory(config, [(n, data / "train" / "sources" / n) for n in subset], pseudo_dir, cfg.target)
        pseudo = [read_labelmap(pseudo_dir / f"{Path(e.gt).stem}.pgm") for e in train_entries]
        result = toynet.train(cfg.train_config(), train_images, pseudo, len(target))
        model_dir = out_dir / "models"
        model_dir.mkdir(parents=True, exist_ok=True)
        toynet.save_model(result.params, model_dir / f"{label}.tnet")
        logs[label] = [e.line() for e in result.log]
        (model_dir / f"{label}.log").write_text("\n".join(logs[label]) + "\n", encoding="utf-8")

        pred_dir = out_dir / "pred" / label
        pred_dir.mkdir(parents=True, exist_ok=True)
        pred_paths = []
        for e, image in zip(test_entries, test_images):
            path = pred_dir / f"{Path(e.gt).stem}.pgm"
            write_labelmap(toynet.infer(result.params, image), path)
            pred_paths.append(path)
        ious, m = evaluate_dirs(test_gt, pred_paths, len(target), eval_classes)
        rows.append(Row(label, ious, m, "trained", subset))
        log.info("%s mIoU %.4f", label, m)

    table = [(r.label, r.ious, r.miou) for r in rows]
    report = format_report(table, class_names)
    (out_dir / "report.txt").write_text(report, encoding="utf-8")
    (out_dir / "report.tsv").write_text(format_machine_report(table), encoding="utf-8")
    return PipelineResult(rows, class_names, report, logs)


def mean_miou(results: Sequence[PipelineResult], label: str) -> float:
    return float(np.mean([next(r.miou for r in res.rows if r.label == label) for res in results]))
