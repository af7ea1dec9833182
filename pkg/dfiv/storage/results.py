"""
Result documents and training logs on disk.
Whole-file writes go through a temp file that is renamed into place on success.
"""
import json
import os
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import IO, Generator, Iterable, List, Union

from loguru import logger

from dfiv.schemas.experiment import RunReport

PathLike = Union[str, Path]


@contextmanager
def atomic_write(path: PathLike, mode: str = "w") -> Generator[IO, None, None]:
    """
    Context manager for whole-file writes: the temp file is renamed over
    ``path`` on success and removed on failure
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", dir=target.parent)
    handle = os.fdopen(fd, mode, encoding=None if "b" in mode else "utf-8")
    try:
        yield handle
        handle.flush()
        os.fsync(handle.fileno())
        handle.close()
        os.replace(tmp_name, target)
    except Exception as e:
        handle.close()
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        logger.error(f"❌ Write to {target} rolled back: {e}")
        raise


def write_report(report: RunReport, path: PathLike) -> Path:
    with atomic_write(path) as handle:
        handle.write(report.model_dump_json(indent=2))
        handle.write("\n")
    logger.info(f"💾 Results written to {path}")
    return Path(path)


def read_report(path: PathLike) -> RunReport:
    return RunReport.model_validate_json(Path(path).read_text(encoding="utf-8"))


def write_jsonl(records: Iterable[dict], path: PathLike) -> Path:
    with atomic_write(path) as handle:
        for record in records:
            handle.write(json.dumps(record, sort_keys=False))
            handle.write("\n")
    return Path(path)


def read_jsonl(path: PathLike) -> List[dict]:
    with open(path, "r", encoding="utf-8") as handle:
        return [json.loads(line) for line in handle if line.strip()]
