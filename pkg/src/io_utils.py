import os
import tempfile
from pathlib import Path


def atomic_write_bytes(target: Path, content: bytes) -> Path:
    """ Temp file in the target directory, then rename: readers never see a partial file """
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as tmp:
            tmp.write(content)
            tmp.flush()
            os.fsync(tmp.fileno())
        os.replace(tmp_path, target)
    except BaseException:
        Path(tmp_path).unlink(missing_ok=True)
        raise
    return target


def atomic_write_text(target: Path, content: str, encoding: str = "utf-8") -> Path:
    return atomic_write_bytes(target, content.encode(encoding))
