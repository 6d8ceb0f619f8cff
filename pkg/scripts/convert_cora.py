"""Convert the LINQS Cora release (cora.content, cora.cites) to the ckgnn text format.

    python3 scripts/convert_cora.py path/to/cora out/cora.txt

Node ids follow the order of cora.content; labels are the sorted class
names. Citations are undirected: reciprocal pairs collapse into one edge
and self-citations are dropped (both are reported on stderr).
"""
import argparse
import sys
from pathlib import Path


def convert(src: Path, out: Path) -> None:
    ids, feats, names = {}, [], []
    for line in (src / "cora.content").read_text().splitlines():
        tok = line.split()
        if not tok:
            continue
        ids[tok[0]] = len(ids)
        feats.append(tok[1:-1])
        names.append(tok[-1])
    classes = sorted(set(names))
    d = len(feats[0])

    edges, dropped_self, dropped_dup, missing = set(), 0, 0, 0
    for line in (src / "cora.cites").read_text().splitlines():
        tok = line.split()
        if len(tok) != 2:
            continue
        if tok[0] not in ids or tok[1] not in ids:
            missing += 1
            continue
        i, j = sorted((ids[tok[0]], ids[tok[1]]))
        if i == j:
            dropped_self += 1
        elif (i, j) in edges:
            dropped_dup += 1
        else:
            edges.add((i, j))

    lines = [f"{len(ids)} {d} {len(classes)}"]
    for k, (f, name) in enumerate(zip(feats, names)):
        lines.append(f"N {k} {classes.index(name)} {' '.join(f)}")
    lines.extend(f"E {i} {j}" for i, j in sorted(edges))
    out.write_text("\n".join(lines) + "\n")
    print(f"{len(ids)} nodes, {len(edges)} undirected edges, {len(classes)} classes; dropped "
          f"{dropped_dup} reciprocal, {dropped_self} self, {missing} unknown-id citations",
          file=sys.stderr)


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("src", type=Path, help="directory holding cora.content and cora.cites")
    ap.add_argument("out", type=Path)
    args = ap.parse_args()
    convert(args.src, args.out)
