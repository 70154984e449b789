import csv
import io
import json
import math
import os
import shutil
import tempfile
import numpy as np
import torch

from contextlib import contextmanager
from typing import Dict, Iterable, Iterator, List, Sequence
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from app import logger
from app.constants import CSV_FLOAT_FORMAT, INF_TEXT
from app.exceptions.config_errors import OutputExistsError

def format_value(value) -> str:
    """Fixed CSV/JSON text for numbers; infinities become 'inf'"""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, (float, np.floating)):
        if math.isinf(value):
            return INF_TEXT if value > 0 else f"-{INF_TEXT}"
        return format(float(value), CSV_FLOAT_FORMAT)
    return str(value)

def json_safe(value):
    """Replace infinities in nested report data with their text form"""
    if isinstance(value, dict):
        return {k: json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_safe(v) for v in value]
    if isinstance(value, (float, np.floating)) and math.isinf(value):
        return format_value(value)
    if isinstance(value, np.generic):
        return value.item()
    return value

@contextmanager
def atomic_directory(path: str, overwrite: bool = False) -> Iterator[str]:
    """Yield a temporary sibling directory that replaces `path` only on success"""
    if os.path.exists(path) and not overwrite:
        raise OutputExistsError(path)
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    staging = tempfile.mkdtemp(prefix=f".{os.path.basename(path)}.", dir=parent)
    try:
        yield staging
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    if os.path.exists(path):
        shutil.rmtree(path)
    os.replace(staging, path)
    logger.info(f"Wrote outputs to {path}")

def write_csv(path: str, columns: Sequence[str], rows: Iterable[Dict], config_hash: str) -> None:
    """CSV with a leading `# config_hash=...` comment line"""
    buffer = io.StringIO()
    buffer.write(f"# config_hash={config_hash}\n")
    writer = csv.DictWriter(buffer, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({c: format_value(row[c]) for c in columns})
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(buffer.getvalue())

def read_csv(path: str) -> List[Dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as f:
        lines = [line for line in f if not line.startswith("#")]
    return list(csv.DictReader(lines))

def write_json(path: str, data: Dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(json_safe(data), f, indent=2, sort_keys=True)
        f.write("\n")

def read_json(path: str) -> Dict:
    with open(path, encoding="utf-8") as f:
        return json.load(f)

def save_png(path: str, image: torch.Tensor, config_hash: str) -> None:
    """Write a (3, H, W) image in [0, 1] as an 8-bit PNG tagged with the config hash"""
    array = image.detach().cpu().clamp(0.0, 1.0).permute(1, 2, 0).numpy()
    pixels = np.round(array * 255.0).astype(np.uint8)
    info = PngInfo()
    info.add_text("config_hash", config_hash)
    Image.fromarray(pixels).save(path, pnginfo=info)
