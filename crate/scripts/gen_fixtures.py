#!/usr/bin/env python3
"""Regenerates the synthetic case fixtures under crates/core/fixtures.

Layout per case: cells.csv, structures.csv, global_features.csv and an
optional sidecar.json with cnn_probs and ground_truth.

  demo/      one 6-cell case used by executor examples
  train/     12 labelled cases, 6 per class
  eval/      20 labelled cases, 10 per class; 3 CNN sidecars are wrong
"""

import json
import random
import shutil
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent / "crates" / "core" / "fixtures"
TYPES = ["neoplastic", "inflammatory", "connective", "dead", "epithelial"]
CLASSES = ["tubular_adenocarcinoma", "papillary_adenocarcinoma"]

# Class centres for the four core features.
CENTRES = {
    "tubular_adenocarcinoma": {
        "neoplastic_ratio": 0.55,
        "nuclear_pleomorphism_index": 0.30,
        "gland_area_ratio": 0.35,
        "lumen_ratio": 0.40,
    },
    "papillary_adenocarcinoma": {
        "neoplastic_ratio": 0.75,
        "nuclear_pleomorphism_index": 0.50,
        "gland_area_ratio": 0.60,
        "lumen_ratio": 0.20,
    },
}
TRAIN_OFFSETS = [-0.02, -0.012, -0.004, 0.004, 0.012, 0.02]
CELL_HEADER = "cell_id,cell_type,area,perimeter,eccentricity,circularity,mean_intensity,glcm_contrast,centroid_x,centroid_y"
STRUCT_HEADER = "structure_id,structure_type,cell_count,area,lumen_ratio"
GLOBAL_HEADER = "total_cells,neoplastic_ratio,mean_nuclear_area,nuclear_pleomorphism_index,gland_area_ratio,nn_mean_distance"


def f(x):
    return f"{x:.6f}"


def write(path, header, rows):
    path.write_text(header + "\n" + "".join(",".join(r) + "\n" for r in rows))


def cell_row(i, kind, area, rng):
    perimeter = 2 * (3.14159265 * area) ** 0.5 * rng.uniform(1.0, 1.15)
    return [
        str(i), kind, f(area), f(perimeter), f(rng.uniform(0.2, 0.9)), f(rng.uniform(0.5, 0.95)),
        f(rng.uniform(80, 200)), f(rng.uniform(1, 30)), f(rng.uniform(0, 256)), f(rng.uniform(0, 256)),
    ]


def write_case(dirpath, label, offset, rng, cnn=None):
    dirpath.mkdir(parents=True)
    c = {k: v + offset for k, v in CENTRES[label].items()}
    n = 40
    cells = []
    for i in range(n):
        kind = "neoplastic" if i < round(c["neoplastic_ratio"] * n) else rng.choice(TYPES[1:])
        cells.append(cell_row(i + 1, kind, rng.uniform(250, 550), rng))
    write(dirpath / "cells.csv", CELL_HEADER, cells)
    lumen = c["lumen_ratio"]
    structs = []
    for j, d in enumerate([-0.05, 0.05, -0.02, 0.02]):
        structs.append([str(j + 1), "gland_like" if j % 2 == 0 else "cluster", str(rng.randint(5, 20)),
                        f(rng.uniform(800, 3000)), f(lumen + d)])
    write(dirpath / "structures.csv", STRUCT_HEADER, structs)
    areas = [float(r[2]) for r in cells]
    write(dirpath / "global_features.csv", GLOBAL_HEADER, [[
        str(n), f(c["neoplastic_ratio"]), f(sum(areas) / n), f(c["nuclear_pleomorphism_index"]),
        f(c["gland_area_ratio"]), f(rng.uniform(12, 20)),
    ]])
    sidecar = {"ground_truth": label}
    if cnn is not None:
        sidecar["cnn_probs"] = cnn
    (dirpath / "sidecar.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def demo(dirpath):
    dirpath.mkdir(parents=True)
    rng = random.Random(7)
    kinds = ["neoplastic", "inflammatory", "neoplastic", "neoplastic", "connective", "neoplastic"]
    areas = [350, 420, 380, 450, 300, 500]
    write(dirpath / "cells.csv", CELL_HEADER, [cell_row(i + 1, k, a, rng) for i, (k, a) in enumerate(zip(kinds, areas))])
    write(dirpath / "structures.csv", STRUCT_HEADER, [
        ["1", "gland_like", "4", f(1200.0), f(0.35)],
        ["2", "cluster", "2", f(600.0), ""],
    ])
    write(dirpath / "global_features.csv", GLOBAL_HEADER, [["6", f(4 / 6), f(400.0), f(0.32), f(0.3), f(14.5)]])
    sidecar = {"ground_truth": CLASSES[0], "cnn_probs": {CLASSES[0]: 0.7, CLASSES[1]: 0.3}}
    (dirpath / "sidecar.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def main():
    for sub in ["demo", "train", "eval"]:
        shutil.rmtree(ROOT / sub, ignore_errors=True)
    demo(ROOT / "demo" / "case_demo")
    rng = random.Random(20240611)
    for k, label in enumerate(CLASSES):
        for i, off in enumerate(TRAIN_OFFSETS):
            write_case(ROOT / "train" / f"train_{k}{i:02d}", label, off, rng)
    wrong = {2, 7, 13}
    for i in range(20):
        label = CLASSES[i % 2]
        other = CLASSES[1 - i % 2]
        off = rng.uniform(-0.015, 0.015)
        cnn = {label: 0.4, other: 0.6} if i in wrong else {label: 0.9, other: 0.1}
        write_case(ROOT / "eval" / f"case_{i:02d}", label, off, rng, cnn)
    question = {
        "case_id": "*",
        "prompt_text": "Which adenocarcinoma subtype best matches this patch?",
        "options": CLASSES,
    }
    (ROOT / "question.json").write_text(json.dumps(question, indent=2) + "\n")


if __name__ == "__main__":
    main()
