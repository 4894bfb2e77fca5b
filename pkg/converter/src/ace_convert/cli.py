"""ace-convert: export/import between PyTorch checkpoints and ACET files."""

from __future__ import annotations

import argparse
import json
import sys

from .acet import AcetError
from .convert import MapError, NameMap, export_to_acet, import_from_acet


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ace-convert",
        description="Bridge PyTorch checkpoints and the ACET v1 container.",
    )
    sub = parser.add_subparsers(dest="direction")
    for direction, blurb in (("export", "torch -> ACET"), ("import", "ACET -> torch")):
        cmd = sub.add_parser(direction, help=blurb)
        cmd.add_argument("--map", dest="map_path", help="JSON name-map file (default: identity)")
        cmd.add_argument("--in", dest="input", required=False, help="input file")
        cmd.add_argument("--out", dest="output", required=False, help="output file")
    args = parser.parse_args(argv)
    if args.direction not in ("export", "import"):
        parser.print_help()
        return 1
    if not args.input or not args.output:
        print(f"error: {args.direction} requires --in and --out", file=sys.stderr)
        return 1
    try:
        name_map = NameMap.load(args.map_path) if args.map_path else NameMap.identity()
        if args.direction == "export":
            summary = export_to_acet(args.input, name_map, args.output)
        else:
            summary = import_from_acet(args.input, name_map, args.output)
    except (MapError, AcetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(summary.to_json(), sort_keys=True, indent=2))
    return 0


def entrypoint() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
