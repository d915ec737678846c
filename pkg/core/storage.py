import hashlib
import json
import logging
import os

logger = logging.getLogger('storage')


def atomic_write_bytes(path: str, data: bytes) -> str:
    """Writes data to path through a temporary sibling file and a rename.

    Readers never observe a half-written file: the bytes land in ``path + ".tmp"``
    first and are moved over the destination with ``os.replace``.

    Args:
        path: Destination file path. Parent directories are created.
        data: File contents.

    Returns:
        The path written.
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    temp_path = path + ".tmp"
    try:
        with open(temp_path, "wb") as handle:
            handle.write(data)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(temp_path, path)
    except OSError as e:
        logger.error(f"Error writing {path}: {e}")
        if os.path.exists(temp_path):
            try:
                os.remove(temp_path)
            except OSError:
                pass
        raise
    return path


def atomic_write_text(path: str, text: str) -> str:
    return atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path: str, payload) -> str:
    """JSON with sorted keys and a trailing newline, so equal payloads give equal bytes."""
    return atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()
