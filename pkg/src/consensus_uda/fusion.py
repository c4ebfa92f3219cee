"""Pseudo-labels by unanimous agreement of mapped source predictions.

A pixel keeps a label only if every source, after mapping into the target
taxonomy, predicts that same label. Disagreement, any ignored input, or an
agreed label listed in ``ignore_ids`` (the target's "Other" class) all yield
255.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .taxonomy import IGNORE_ID, Config, apply_mapping, validate_mapping
from .tensor_io import read_prediction, write_labelmap

log = logging.getLogger(__name__)

PREDICTION_SUFFIXES = (".pgm", ".pmf", ".pmf1")


@dataclass
class FusionResult:
    pseudo: np.ndarray
    coverage: float
    per_class_counts: np.ndarray


def consensus_fuse(
    mapped_preds: Sequence[np.ndarray],
    ignore_ids: Iterable[int] = (),
    n_classes: int | None = None,
) -> FusionResult:
    if len(mapped_preds) == 0:
        raise DataError("consensus_fuse needs at least one prediction")
    first = np.asarray(mapped_preds[0])
    for i, pred in enumerate(mapped_preds[1:], start=1):
        if np.shape(pred) != first.shape:
            raise ShapeError(f"prediction {i} has shape {np.shape(pred)}, expected {first.shape}")

    agree = first != IGNORE_ID
    for pred in mapped_preds[1:]:
        agree &= np.asarray(pred) == first
    for cid in ignore_ids:
        agree &= first != cid
    pseudo = np.where(agree, first, IGNORE_ID).astype(np.uint8)

    labelled = pseudo[agree]
    if n_classes is None:
        n_classes = int(labelled.max()) + 1 if labelled.size else 0
    counts = np.bincount(labelled, minlength=n_classes).astype(np.int64)
    coverage = float(agree.sum()) / pseudo.size if pseudo.size else 0.0
    return FusionResult(pseudo, coverage, counts)


@dataclass
class BatchReport:
    coverage: dict[str, float] = field(default_factory=dict)
    class_counts: np.ndarray | None = None
    class_names: tuple[str, ...] = ()
    skipped: list[str] = field(default_factory=list)

    @property
    def mean_coverage(self) -> float:
        # unweighted mean over images, summed in sorted-name order
        vals = [self.coverage[k] for k in sorted(self.coverage)]
        return sum(vals) / len(vals) if vals else 0.0

    def summary_text(self) -> str:
        lines = [f"{name} coverage={self.coverage[name]:.6f}" for name in sorted(self.coverage)]
        hist = ",".join(f"{n}:{int(c)}" for n, c in zip(self.class_names, self.class_counts))
        lines.append(
            f"TOTAL images={len(self.coverage)} mean_coverage={self.mean_coverage:.6f} "
            f"skipped={len(self.skipped)} counts={hist}"
        )
        return "\n".join(lines) + "\n"


def list_predictions(directory) -> dict[str, Path]:
    """Map file stem -> path for every prediction file in ``directory``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"not a directory: {directory}")
    found = {}
    for path in sorted(directory.iterdir()):
        if path.suffix.lower() in PREDICTION_SUFFIXES:
            if path.stem in found:
                raise DataError(f"{directory}: two prediction files share the stem {path.stem!r}")
            found[path.stem] = path
    return found


def fuse_directory(
    config: Config,
    sources: Sequence[tuple[str, str | Path]],
    out_dir,
    target: str = "greenhouse",
    other_is_ignore: bool = True,
) -> BatchReport:
    """Fuse aligned prediction files from several source directories.

    ``sources`` pairs a source taxonomy name with the directory of that
    model's predictions. Files present in only some sources are skipped and
    listed in the report.
    """
    if not sources:
        raise DataError("no sources given")
    target_tax = config.taxonomy(target)
    mappings = []
    for name, _ in sources:
        mapping = config.mapping(name, target)
        issues = validate_mapping(mapping, config.taxonomy(name), target_tax)
        if issues:
            raise ConfigError(f"mapping {name} -> {target} invalid: " + "; ".join(i.message for i in issues))
        mappings.append(mapping)

    listings = [list_predictions(d) for _, d in sources]
    common = set(listings[0]).intersection(*listings[1:])
    everything = set().union(*listings)
    if not common:
        raise DataError("zero common filenames across source directories")

    ignore_ids = target_tax.ids_named("other") if other_is_ignore else []
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = BatchReport(
        class_counts=np.zeros(len(target_tax), dtype=np.int64),
        class_names=target_tax.classes,
        skipped=sorted(everything - common),
    )
    for stem in sorted(common):
        mapped = []
        for listing, mapping in zip(listings, mappings):
            path = listing[stem]
            try:
                mapped.append(apply_mapping(mapping, read_prediction(path)))
            except DataError as exc:
                raise type(exc)(f"{path}: {exc}") from exc
        try:
            result = consensus_fuse(mapped, ignore_ids=ignore_ids, n_classes=len(target_tax))
        except ShapeError as exc:
            raise ShapeError(f"{stem}: {exc}") from exc
        write_labelmap(result.pseudo, out_dir / f"{stem}.pgm")
        report.coverage[stem] = result.coverage
        report.class_counts += result.per_class_counts
    if report.skipped:
        log.warning("skipped %d files not present in every source: %s", len(report.skipped), report.skipped)
    (out_dir / "summary.txt").write_text(report.summary_text(), encoding="utf-8")
    return report
