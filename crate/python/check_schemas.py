"""Validates the shipped scenarios and a sample of CLI reports against the
JSON schemas in docs/. Needs the `jsonschema` package and a built CLI
(cargo build -p cachevisor-cli).
"""

import json
import subprocess
import tempfile
from pathlib import Path
import jsonschema
from referencing import Registry, Resource

ROOT = Path(__file__).resolve().parent.parent
docs = ROOT / "docs"
scenarios = ROOT / "crates" / "cli" / "scenarios"
schemas = {p.name: json.loads(p.read_text()) for p in docs.glob("*.schema.json")}
for s in schemas.values():
    jsonschema.Draft202012Validator.check_schema(s)
reg = Registry().with_resources(
    [(s["$id"], Resource.from_contents(s)) for s in schemas.values()])
for p in scenarios.glob("*.json"):
    jsonschema.validate(json.loads(p.read_text()), schemas["scenario.schema.json"])

v = jsonschema.Draft202012Validator(schemas["report.schema.json"], registry=reg)
B = str(ROOT / "target" / "debug" / "cachevisor")
log = str(Path(tempfile.mkdtemp()) / "aes.log")
runs = [
    ["run-attack", "integrity"], ["run-attack", "integrity", "--countermeasure", "acpt"],
    ["run-attack", "integrity", "--countermeasure", "detect"],
    ["run-attack", "aes-extract", "--seed", "1", "--log-out", log],
    ["run-attack", "aes-extract", "--countermeasure", "flush", "--encryptions", "100"],
    ["check-props", "all", "--seeds", "1", "--steps", "200"],
    ["demo-spawn"], ["run-scenario", str(scenarios / "wx.json")],
    ["run-scenario", str(scenarios / "integrity_acpt.json")],
    ["analyze-log", log],
]
for r in runs:
    out = subprocess.run([B] + r, capture_output=True, text=True, check=False).stdout
    v.validate(json.loads(out))
print(f"schemas: ok ({len(runs)} reports)")
