"""Write JSON, CSV and plain-text reports for runs."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Union

import pandas as pd
from pydantic import BaseModel
from tabulate import tabulate

from mixed_trees.utils.io import atomic_write_text


def write_json_report(payload: Union[Dict[str, Any], BaseModel], output_path: Path) -> Path:
    if isinstance(payload, BaseModel):
        text = payload.model_dump_json(indent=2)
    else:
        text = json.dumps(payload, indent=2)
    return atomic_write_text(output_path, text + "\n")


def write_text_report(text: str, output_path: Path) -> Path:
    return atomic_write_text(output_path, text if text.endswith("\n") else text + "\n")


def write_frame_csv(frame: pd.DataFrame, output_path: Path) -> Path:
    return atomic_write_text(output_path, frame.to_csv(index=False, lineterminator="\n"))


def write_rows_csv(rows: Iterable[Dict[str, Any]], columns: Sequence[str], output_path: Path) -> Path:
    return write_frame_csv(pd.DataFrame(list(rows), columns=list(columns)), output_path)


def render_table(rows: List[List[Any]], headers: Sequence[str]) -> str:
    return tabulate(rows, headers=list(headers), tablefmt="github")
