"""
formats.py - Run-config parsing and the plain artifact formats (CSV, binary PGM)
"""

import csv
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError

from interprobust.exceptions import ConfigError
from interprobust.models import RunConfig

logger = logging.getLogger(__name__)

PGM_MAXVAL = 255


# =====================================================
# === RUN CONFIG ===
# =====================================================

def parse_pairs(text: str) -> Dict[str, str]:
    """`key = value` lines; '#' starts a comment; blank values mean unset."""
    pairs: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in pairs:
            raise ConfigError(f"duplicate key on line {lineno}", key)
        pairs[key] = value
    return pairs


def build_run_config(pairs: Dict[str, Any]) -> RunConfig:
    values = {k: v for k, v in pairs.items() if v != ""}
    try:
        return RunConfig(**values)
    except ValidationError as exc:
        first = exc.errors()[0]
        key = str(first["loc"][0]) if first["loc"] else None
        message = "unknown key" if first["type"] == "extra_forbidden" else first["msg"]
        raise ConfigError(message, key) from None


def parse_run_config(text: str, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    pairs: Dict[str, Any] = dict(parse_pairs(text))
    pairs.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return build_run_config(pairs)


def read_run_config(path: Optional[Union[str, Path]], overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8") if path else ""
    return parse_run_config(text, overrides)


# =====================================================
# === CSV ===
# =====================================================

def format_cell(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return "nan" if np.isnan(value) else f"{float(value):.6g}"
    if value is None:
        return ""
    return str(value)


def write_csv(path: Union[str, Path], header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_cell(v) for v in row])
    logger.debug(f"wrote {path}")
    return path


# =====================================================
# === SALIENCY EXPORT (PGM P5) ===
# =====================================================

def normalise_pair(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Map both grids to 0..255 by their common largest |value|; 0 lands on mid-grey."""
    a64, b64 = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a64).max(initial=0.0), np.abs(b64).max(initial=0.0))
    if scale == 0:
        scale = 1.0

    def to_gray(g: np.ndarray) -> np.ndarray:
        return np.rint((g / scale + 1.0) * 0.5 * PGM_MAXVAL).clip(0, PGM_MAXVAL).astype(np.uint8)

    return to_gray(a64), to_gray(b64)


def upsample(grid: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of a 2-D grid."""
    h, w = grid.shape
    rows = np.arange(shape[0]) * h // shape[0]
    cols = np.arange(shape[1]) * w // shape[1]
    return grid[rows[:, None], cols[None, :]]


def write_pgm(path: Union[str, Path], image: np.ndarray) -> Path:
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError(f"PGM needs a 2-D uint8 image, got {image.dtype} {image.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = image.shape
    path.write_bytes(f"P5\n{w} {h}\n{PGM_MAXVAL}\n".encode("ascii") + image.tobytes())
    return path


def export_pair(
    stem: Union[str, Path],
    benign: np.ndarray,
    adversarial: np.ndarray,
    size: Optional[Tuple[int, int]] = None,
) -> List[Path]:
    """<stem>_benign.pgm and <stem>_adv.pgm sharing one normalisation."""
    images = normalise_pair(benign, adversarial)
    if size is not None:
        images = tuple(upsample(img, size) for img in images)
    stem = Path(stem)
    return [
        write_pgm(stem.with_name(f"{stem.name}_{tag}.pgm"), img)
        for tag, img in zip(("benign", "adv"), images)
    ]
