"""Validates captured /v1 payloads against the published JSON Schema.

Each file in the payload directory is named <Definition>__<n>.json and must
match #/$defs/<Definition>. Every definition that names a request or
response body must be exercised at least once.
"""

import argparse
import json
import pathlib
import sys

import jsonschema
from referencing import Registry, Resource


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("schema", type=pathlib.Path)
    parser.add_argument("payloads", type=pathlib.Path)
    args = parser.parse_args()

    schema = json.loads(args.schema.read_text())
    jsonschema.Draft202012Validator.check_schema(schema)
    registry = Registry().with_resource(schema["$id"], Resource.from_contents(schema))

    files = sorted(args.payloads.glob("*.json"))
    if not files:
        print(f"no payloads under {args.payloads}", file=sys.stderr)
        return 1

    failures = 0
    seen = set()
    for path in files:
        name = path.name.split("__", 1)[0]
        if name not in schema["$defs"]:
            print(f"{path.name}: no definition named {name}", file=sys.stderr)
            failures += 1
            continue
        seen.add(name)
        validator = jsonschema.Draft202012Validator(
            {"$ref": f"{schema['$id']}#/$defs/{name}"}, registry=registry
        )
        errors = list(validator.iter_errors(json.loads(path.read_text())))
        for e in errors:
            where = "/".join(str(p) for p in e.absolute_path) or "(root)"
            print(f"{path.name}: {where}: {e.message}", file=sys.stderr)
        failures += bool(errors)

    wanted = {"Error"}
    for endpoint, spec in schema["endpoints"].items():
        for role in ("request", "response"):
            ref = spec.get(role)
            if ref in schema["$defs"]:
                wanted.add(ref)
    missing = sorted(wanted - seen)
    if missing:
        print(f"never exercised: {', '.join(missing)}", file=sys.stderr)
        failures += 1

    print(f"{len(files)} payloads, {len(seen)} definitions, {failures} failures")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
