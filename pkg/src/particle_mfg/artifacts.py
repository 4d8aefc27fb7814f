#!/usr/bin/env python3
"""
成果物ファイルの書き出し
- 一時ファイルに書いてから rename する (中断しても途中までのファイルが残らない)
"""

import logging
import os
import tempfile
from pathlib import Path

logger = logging.getLogger(__name__)


def atomic_write_bytes(path: str | Path, data: bytes) -> Path:
    """
    バイト列をアトミックに書き出す

    Args:
        path: 出力先
        data: 書き込む内容

    Returns:
        書き出したファイルのパス
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    # 同じディレクトリに一時ファイルを作る (os.replace は同一ファイルシステム内でのみアトミック)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise

    logger.debug(f"Wrote {len(data)} bytes to {path}")
    return path


def atomic_write_text(path: str | Path, text: str) -> Path:
    """テキストをUTF-8・LF改行でアトミックに書き出す"""
    return atomic_write_bytes(path, text.encode("utf-8"))
