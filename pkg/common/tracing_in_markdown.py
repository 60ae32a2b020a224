import json
from pathlib import Path
from typing import Any, Optional

from common.config import OUT_DIR


def _json_block(document: Any) -> str:
    # NaN/inf are legal in the reports, they are not meant to be parsed strictly
    return f"```json\n{json.dumps(document, indent=2, sort_keys=True, default=str)}\n```\n\n"


def write_run_report(
    *,
    timestamp: str,
    subcommand: str,
    manifest: dict,
    results: dict,
    outputs: Optional[dict[str, str]] = None,
    out_dir: Optional[Path] = None,
) -> Path:
    out_dir = Path(out_dir or OUT_DIR)
    out_dir.mkdir(parents=True, exist_ok=True)
    file = out_dir / f"{timestamp}_{subcommand.upper().replace('-', '_')}.md"
    if file.exists():
        raise FileExistsError(f"File {file} already exists")

    with file.open("w", encoding="utf-8") as f:
        f.write(f"# {subcommand.upper()}\n\n")

        f.write("## Results\n\n")
        f.write(_json_block(results))

        if outputs:
            f.write("## Outputs\n\n")
            for name, path in outputs.items():
                f.write(f"- {name}: `{path}`\n")
            f.write("\n")

        f.write("## Manifest\n\n")
        f.write(_json_block(manifest))
    return file
