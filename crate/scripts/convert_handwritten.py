#!/usr/bin/env python3
"""Convert the UCI "Multiple Features" (handwritten digits) archive into the
headerless CSV + JSON manifest layout read by `crnp`.

Accepted inputs (pass the directory holding the six view files):

  * the raw UCI archive: whitespace-separated `mfeat-fou`, `mfeat-fac`, ...
    with 2000 rows ordered by class (200 rows per digit);
  * the CSV copies shipped inside the `mvlearn` wheel
    (`mvlearn/datasets/UCImultifeature/mfeat-*.csv`), which carry a header
    row and the label in the last column.

Usage: convert_handwritten.py <input_dir> <output_dir>
"""
import json
import os
import sys

VIEWS = ["fou", "fac", "kar", "pix", "zer", "mor"]


def read_raw(path):
    rows = []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if parts:
                rows.append([float(v) for v in parts])
    labels = [i // 200 for i in range(len(rows))]
    return rows, labels


def read_csv(path):
    rows, labels = [], []
    with open(path) as f:
        next(f)  # column-index header
        for line in f:
            parts = line.strip().split(",")
            if len(parts) < 2:
                continue
            rows.append([float(v) for v in parts[:-1]])
            labels.append(int(float(parts[-1])))
    return rows, labels


def main():
    if len(sys.argv) != 3:
        print(__doc__)
        sys.exit(2)
    src, dst = sys.argv[1], sys.argv[2]
    os.makedirs(dst, exist_ok=True)
    labels = None
    views = []
    for v in VIEWS:
        csv_path = os.path.join(src, "mfeat-%s.csv" % v)
        raw_path = os.path.join(src, "mfeat-%s" % v)
        if os.path.exists(csv_path):
            rows, lab = read_csv(csv_path)
        elif os.path.exists(raw_path):
            rows, lab = read_raw(raw_path)
        else:
            sys.exit("missing view file for %s" % v)
        if labels is None:
            labels = lab
        elif labels != lab:
            sys.exit("label order differs between views")
        name = "mfeat-%s.csv" % v
        with open(os.path.join(dst, name), "w") as f:
            for r in rows:
                f.write(",".join(repr(x) for x in r) + "\n")
        views.append({"view_name": v, "matrix_file": name, "feature_dim": len(rows[0])})
    with open(os.path.join(dst, "labels.csv"), "w") as f:
        for l in labels:
            f.write("%d\n" % l)
    manifest = {
        "name": "handwritten",
        "task": "classification",
        "class_count": 10,
        "views": views,
        "labels_file": "labels.csv",
        "sample_count": len(labels),
    }
    with open(os.path.join(dst, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


if __name__ == "__main__":
    main()
