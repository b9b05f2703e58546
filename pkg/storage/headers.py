# storage/headers.py

"""Text header shared by the binary artifacts: a magic line, `key=value` lines, `end_header`.

CSV artifacts carry the same run config as a leading `# {json}` comment line.
"""

import json
from pathlib import Path
from typing import Any, BinaryIO, Dict, Iterator, TextIO, Tuple

from errors import ArtifactFormatError

END_HEADER = b"end_header\n"
CSV_PREAMBLE = "# "


def write_header(fh: BinaryIO, magic: str, fields: Dict[str, str]) -> None:
    fh.write(f"{magic}\n".encode())
    for key, value in fields.items():
        text = str(value)
        if "\n" in text or "=" in key:
            raise ArtifactFormatError(f"header field {key!r} cannot be encoded on one line")
        fh.write(f"{key}={text}\n".encode())
    fh.write(END_HEADER)


def read_header(fh: BinaryIO, magic: str) -> Dict[str, str]:
    first = fh.readline().decode().rstrip("\n")
    if first != magic:
        raise ArtifactFormatError(f"expected {magic!r} header, found {first!r}")
    fields: Dict[str, str] = {}
    while True:
        line = fh.readline()
        if not line:
            raise ArtifactFormatError("header is not terminated")
        if line == END_HEADER:
            return fields
        key, sep, value = line.decode().rstrip("\n").partition("=")
        if not sep:
            raise ArtifactFormatError(f"malformed header line: {line!r}")
        fields[key] = value


def split_ints(text: str) -> Tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v)


def write_csv_preamble(fh: TextIO, config: Dict[str, Any]) -> None:
    """One `# {json}` comment line ahead of a CSV header row."""
    fh.write(CSV_PREAMBLE + json.dumps(config, sort_keys=True, separators=(",", ":")) + "\n")


def read_csv_preamble(path: Path) -> Dict[str, Any]:
    with open(path) as fh:
        first = fh.readline()
    if not first.startswith(CSV_PREAMBLE):
        return {}
    try:
        return json.loads(first[len(CSV_PREAMBLE):])
    except json.JSONDecodeError as exc:
        raise ArtifactFormatError(f"{path}: malformed config line: {exc}") from exc


def csv_body(fh: TextIO) -> Iterator[str]:
    """Lines of a CSV file with the config comment skipped."""
    return (line for line in fh if not line.startswith("#"))
