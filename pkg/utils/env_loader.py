"""Load the project's .env file before configuration is read."""

from __future__ import annotations

from pathlib import Path
from typing import Optional

from dotenv import load_dotenv


def load_env_recursive(root_dir: Optional[Path | str] = None) -> Optional[Path]:
    """Load ``root_dir/.env`` without overriding variables already set.

    Returns the loaded file, or None when there is none.
    """
    if root_dir is None:
        # utils/ sits one level below the project root
        root_dir = Path(__file__).resolve().parents[1]
    env_path = Path(root_dir).resolve() / ".env"
    if not env_path.exists():
        return None
    load_dotenv(env_path, override=False)
    return env_path
