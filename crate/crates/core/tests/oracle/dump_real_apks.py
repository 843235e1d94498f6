#!/usr/bin/env python3
"""Freeze androguard's view of each APK under tests/fixtures/real/.

Writes, next to every `<name>.apk`:
  <name>.invokes.tsv   dex_entry, caller, target_class, target_method, count
  <name>.manifest.json package / permissions / min_sdk from AXMLPrinter
  <name>.sha256        hashlib digest of the APK and each classes*.dex entry

Type descriptors are normalized the same way the Rust parser renders them:
`Lpkg/Name;` -> `pkg.Name`, arrays get a `[]` suffix per dimension and
primitive descriptors map to their Java keywords.

Only invoke opcodes that name a method_ids entry are kept
(invoke-kind, invoke-kind/range, invoke-polymorphic[/range]).
Requires: pip install androguard lxml
"""
import collections
import hashlib
import json
import logging
import pathlib
import re
import sys
import zipfile

from loguru import logger

logger.remove()
logging.disable(logging.CRITICAL)

from androguard.core.axml import AXMLPrinter  # noqa: E402
from androguard.core.dex import DEX  # noqa: E402

PRIMS = {"V": "void", "Z": "boolean", "B": "byte", "S": "short", "C": "char",
         "I": "int", "J": "long", "F": "float", "D": "double"}
DEX_RE = re.compile(r"^classes([1-9][0-9]*)?\.dex$")
REF_RE = re.compile(r"(\S+?)->([^(\s]+)\(")
ANDROID_NS = "{http://schemas.android.com/apk/res/android}"


def dotted(desc: str) -> str:
    dims = 0
    while desc.startswith("["):
        dims += 1
        desc = desc[1:]
    if desc.startswith("L") and desc.endswith(";"):
        base = desc[1:-1].replace("/", ".")
    else:
        base = PRIMS.get(desc, desc)
    return base + "[]" * dims


def dex_key(name: str):
    m = DEX_RE.match(name)
    return 1 if m.group(1) is None else int(m.group(1))


def dump(apk: pathlib.Path):
    z = zipfile.ZipFile(apk)
    names = sorted((n for n in z.namelist() if DEX_RE.match(n)), key=dex_key)
    digests = {"apk": hashlib.sha256(apk.read_bytes()).hexdigest()}
    rows = collections.Counter()
    for name in names:
        raw = z.read(name)
        digests[name] = hashlib.sha256(raw).hexdigest()
        dex = DEX(raw)
        for cls in dex.get_classes():
            caller = dotted(cls.get_name())
            for method in cls.get_methods():
                for ins in method.get_instructions():
                    op = ins.get_name()
                    if not op.startswith("invoke") or op.startswith("invoke-custom"):
                        continue
                    m = REF_RE.search(ins.get_output())
                    if m is None:
                        raise SystemExit(f"{apk.name}: cannot read target of {ins.get_output()!r}")
                    rows[(name, caller, dotted(m.group(1)), m.group(2))] += 1
    with open(apk.with_suffix(".invokes.tsv"), "w") as out:
        for key in sorted(rows):
            out.write("\t".join(key) + f"\t{rows[key]}\n")

    xml = AXMLPrinter(z.read("AndroidManifest.xml")).get_xml_obj()
    perms = [e.get(ANDROID_NS + "name") for e in xml.iter("uses-permission")]
    sdk = [e.get(ANDROID_NS + "minSdkVersion") for e in xml.iter("uses-sdk")]
    manifest = {
        "package": xml.get("package"),
        "permissions": perms,
        "min_sdk": int(sdk[0]) if sdk and sdk[0] is not None else None,
    }
    apk.with_suffix(".manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    apk.with_suffix(".sha256").write_text(
        "".join(f"{v}  {k}\n" for k, v in digests.items()))
    print(f"{apk.name}: {sum(rows.values())} invokes, {len(rows)} distinct, package {manifest['package']}")


if __name__ == "__main__":
    root = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else pathlib.Path(__file__).parent.parent / "fixtures" / "real")
    for apk in sorted(root.glob("*.apk")):
        dump(apk)
