#!/usr/bin/env python3
"""Convert published pattern/tuple releases into this harness's resource schema.

Pattern source: a directory of per-relation JSONL files where each line holds
one pattern object. Recognized fields per line (all optional except the
template):

  pattern | template        cloze template with [X]/[Y] placeholders
  lemma | extended_lemma    lexical variant key -> lex_group ids
  syn_group | dep_path      syntactic variant key -> syn_group ids
  is_base | lama            marks the base pattern (default: first line)

Tuple source: a directory of per-relation JSONL files with sub_label /
obj_label fields (T-REx/LAMA layout), or already-converted
relation_id/subject/object lines.

Caveats, by design:
  - If the source carries no syntactic-variant annotation, each pattern gets
    its own syn_group and a warning is printed; syntactic-subset statistics
    will not reproduce published group averages without the annotations.
  - Cardinality is not part of the published pattern files; pass the N-M
    relation ids with --nm-relations, everything else becomes N-1.
"""

import argparse
import json
import sys
from pathlib import Path


def convert_patterns(src: Path, out: Path, nm_relations: set[str]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    missing_syn = []
    for path in sorted(src.glob("*.jsonl")):
        relation_id = path.stem
        lex_ids: dict[str, int] = {}
        syn_ids: dict[str, int] = {}
        patterns = []
        saw_syn_annotation = False
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines()):
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            template = row.get("pattern") or row.get("template")
            if not template:
                raise SystemExit(f"{path}:{lineno + 1}: no pattern/template field")
            lex_key = str(row.get("extended_lemma") or row.get("lemma") or len(patterns))
            syn_key = row.get("syn_group") or row.get("dep_path")
            if syn_key is not None:
                saw_syn_annotation = True
            else:
                syn_key = f"unannotated-{len(patterns)}"
            patterns.append(
                {
                    "template": template,
                    "is_base": bool(row.get("is_base") or row.get("lama") or not patterns),
                    "lex_group": lex_ids.setdefault(lex_key, len(lex_ids)),
                    "syn_group": syn_ids.setdefault(str(syn_key), len(syn_ids)),
                    "para_type": row.get("para_type"),
                }
            )
        base_count = sum(p["is_base"] for p in patterns)
        if base_count != 1:
            for p in patterns:
                p["is_base"] = False
            patterns[0]["is_base"] = True
        if not saw_syn_annotation:
            missing_syn.append(relation_id)
        payload = {
            "relation_id": relation_id,
            "name": relation_id,
            "cardinality": "NM" if relation_id in nm_relations else "N1",
            "patterns": patterns,
        }
        (out / f"{relation_id}.json").write_text(
            json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
    if missing_syn:
        print(
            f"warning: no syntactic-variant annotation in {len(missing_syn)} relation(s); "
            "syn_group ids are per-pattern placeholders there",
            file=sys.stderr,
        )


def convert_tuples(src: Path, out_file: Path) -> None:
    count = 0
    with out_file.open("w", encoding="utf-8") as fh:
        for path in sorted(src.glob("*.jsonl")):
            relation_id = path.stem
            for line in path.read_text(encoding="utf-8").splitlines():
                line = line.strip()
                if not line:
                    continue
                row = json.loads(line)
                subject = row.get("sub_label") or row.get("subject")
                obj = row.get("obj_label") or row.get("object")
                if not subject or not obj:
                    continue
                fh.write(
                    json.dumps(
                        {
                            "relation_id": row.get("relation_id", relation_id),
                            "subject": subject,
                            "object": obj,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
                count += 1
    print(f"wrote {count} tuples to {out_file}")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--patterns", type=Path, help="directory of per-relation pattern JSONL files")
    parser.add_argument("--tuples", type=Path, help="directory of per-relation tuple JSONL files")
    parser.add_argument("--nm-relations", default="", help="comma-separated N-M relation ids")
    parser.add_argument("--out", type=Path, required=True)
    args = parser.parse_args()
    if not args.patterns and not args.tuples:
        parser.error("nothing to do: pass --patterns and/or --tuples")
    nm = {part.strip() for part in args.nm_relations.split(",") if part.strip()}
    args.out.mkdir(parents=True, exist_ok=True)
    if args.patterns:
        convert_patterns(args.patterns, args.out / "relations", nm)
        print(f"wrote converted relations to {args.out / 'relations'}")
    if args.tuples:
        convert_tuples(args.tuples, args.out / "tuples.jsonl")


if __name__ == "__main__":
    main()
