# poselift/services/dataset_store.py
"""
Dataset files: a JSON header line followed by one JSON record per line.
"""
import json
import logging
from pathlib import Path
from typing import Union

import numpy as np
from pydantic import BaseModel, ValidationError

from poselift.core.config import DATASET_FORMAT_VERSION
from poselift.core.errors import DatasetFormatError, PoseError
from poselift.models.schemas import DatasetHeader, DatasetMeta, DatasetRow
from poselift.services.geometry import AttributeVector
from poselift.services.skeleton import Dataset, Pose2D, Pose3D, SampleRecord

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def _dumps(model: BaseModel) -> str:
    # json.dumps writes floats with repr, which round-trips float64 exactly
    return json.dumps(model.model_dump(), separators=(",", ":"))


def _describe(err: ValidationError) -> str:
    first = err.errors()[0]
    msg = first["msg"].removeprefix("Value error, ")
    field = ".".join(str(part) for part in first["loc"])
    return f"{msg} ({field})" if field else msg


def _parse(model, text: str, line_no: int):
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"line {line_no}: invalid JSON ({e.msg})") from e
    if not isinstance(data, dict):
        raise DatasetFormatError(f"line {line_no}: expected a JSON object")
    try:
        return model.model_validate(data)
    except ValidationError as e:
        raise DatasetFormatError(f"line {line_no}: {_describe(e)}") from e


def row_to_record(row: DatasetRow) -> SampleRecord:
    return SampleRecord(
        id=row.id,
        domain=row.domain,
        pose2d=Pose2D(np.reshape(row.pose2d, (-1, 2)), row.image_w, row.image_h),
        pose3d=None if row.pose3d is None else Pose3D(np.reshape(row.pose3d, (-1, 3))),
        attributes=None if row.attributes is None else AttributeVector.from_tokens(row.attributes),
        subject_scale=row.subject_scale,
    )


def record_to_row(record: SampleRecord) -> DatasetRow:
    return DatasetRow(
        id=record.id,
        domain=record.domain,
        image_w=record.pose2d.width,
        image_h=record.pose2d.height,
        pose2d=record.pose2d.flat(),
        pose3d=None if record.pose3d is None else record.pose3d.flat(),
        attributes=None if record.attributes is None else record.attributes.tokens(),
        subject_scale=record.subject_scale,
    )


def load_dataset(path: PathLike) -> Dataset:
    """
    Read a dataset file.

    Line numbers in errors count the header as line 1.

    Raises:
        DatasetFormatError: On an unsupported format_version, a malformed line, a duplicate id
            or a Labeled3D record without pose3d
    """
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].strip():
        raise DatasetFormatError(f"{path}: line 1: missing dataset header")

    header = _parse(DatasetHeader, lines[0], 1)
    if header.format_version != DATASET_FORMAT_VERSION:
        raise DatasetFormatError(
            f"{path}: line 1: unsupported format_version {header.format_version}, expected {DATASET_FORMAT_VERSION}"
        )
    records = []
    seen = {}
    for line_no, text in enumerate(lines[1:], start=2):
        if not text.strip():
            continue
        row = _parse(DatasetRow, text, line_no)
        if row.id in seen:
            raise DatasetFormatError(f"line {line_no}: duplicate id {row.id!r} (first on line {seen[row.id]})")
        seen[row.id] = line_no
        try:
            records.append(row_to_record(row))
        except PoseError as e:
            raise DatasetFormatError(f"line {line_no}: {e}") from e

    meta = DatasetMeta(name=header.name, seed=header.seed, tau_mm=header.tau_mm, tau_mode=header.tau_mode)
    ds = Dataset(tuple(records), meta)

    off_frame = [r.id for r in ds if not r.pose2d.in_frame]
    if off_frame:
        logger.warning(f"{path}: {len(off_frame)} record(s) have 2D joints outside the image, first {off_frame[0]!r}")
    logger.info(f"Loaded {len(ds)} records from {path}")
    return ds


def save_dataset(ds: Dataset, path: PathLike) -> None:
    """Write a dataset file; load_dataset restores it field for field."""
    path = Path(path)
    header = DatasetHeader(name=ds.meta.name, seed=ds.meta.seed, tau_mm=ds.meta.tau_mm, tau_mode=ds.meta.tau_mode)
    lines = [_dumps(header)] + [_dumps(record_to_row(r)) for r in ds]
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    logger.info(f"Saved {len(ds)} records to {path}")
