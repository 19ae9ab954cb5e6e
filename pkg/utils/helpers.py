import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Sequence, TypeVar

from tqdm import tqdm

from config.settings import settings

T = TypeVar("T")
R = TypeVar("R")


def log(message: str) -> None:
    """Console status line on stderr (stdout is reserved for command summaries)"""
    if settings.VERBOSE:
        print(message, file=sys.stderr, flush=True)


def dumps(data: Any, indent: int = None) -> str:
    """Stable JSON text: sorted keys, fixed separators"""
    if indent is None:
        return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return json.dumps(data, sort_keys=True, indent=indent, ensure_ascii=False)


def write_json(filepath: Path, data: Any) -> Path:
    filepath = Path(filepath)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    with open(filepath, "w", encoding="utf-8", newline="\n") as f:
        f.write(dumps(data, indent=2))
        f.write("\n")
    return filepath


def read_json(filepath: Path) -> Any:
    with open(filepath, "r", encoding="utf-8") as f:
        return json.load(f)


def append_jsonl(filepath: Path, record: Dict[str, Any]) -> None:
    with open(filepath, "a", encoding="utf-8", newline="\n") as f:
        f.write(dumps(record))
        f.write("\n")


def write_jsonl(filepath: Path, records: Iterable[Dict[str, Any]]) -> Path:
    filepath = Path(filepath)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    with open(filepath, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(dumps(record))
            f.write("\n")
    return filepath


def read_jsonl(filepath: Path) -> List[Dict[str, Any]]:
    records = []
    with open(filepath, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def progress(total: int, desc: str) -> tqdm:
    return tqdm(total=total, desc=desc, file=sys.stderr, leave=False, disable=not settings.SHOW_PROGRESS)


def ordered_map(fn: Callable[[T], R], items: Sequence[T], workers: int = None, desc: str = None) -> List[R]:
    """Map preserving input order; results never depend on worker count"""
    items = list(items)
    workers = workers or settings.NUM_WORKERS
    results: List[R] = []
    with progress(len(items), desc or "") as bar:
        if workers <= 1 or len(items) <= 1:
            for item in items:
                results.append(fn(item))
                bar.update()
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                for result in pool.map(fn, items):
                    results.append(result)
                    bar.update()
    return results


def _flag_value(value: Any) -> Any:
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_flag_value(v) for v in value]
    return value


def write_manifest(out_dir: Path, command: str, flags: Dict[str, Any], files: List[Path]) -> Path:
    out_dir = Path(out_dir)
    return write_json(out_dir / "manifest.json", {
        "command": command,
        "flags": {k: _flag_value(v) for k, v in flags.items()},
        "files": sorted(str(Path(f).relative_to(out_dir)) if Path(f).is_relative_to(out_dir) else str(f) for f in files),
    })
