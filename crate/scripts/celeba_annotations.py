"""Convert CelebA / MAFL 5-point annotation lists to the landmark CSV format.

    python scripts/celeba_annotations.py list_landmarks_align_celeba.txt annotations.csv
    python scripts/celeba_annotations.py --mafl MAFL/testing.txt list_landmarks_align_celeba.txt test.csv

The CelebA list has two header lines, then `<file> x1 y1 ... x5 y5` per image
in the order left eye, right eye, nose, left mouth corner, right mouth corner.
With `--mafl`, only the images named in that split file are written. Also
writes a matching `manifest.txt` next to the output.
"""

import argparse
import csv
import os


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("landmarks")
    ap.add_argument("out")
    ap.add_argument("--mafl", help="MAFL split file listing the images to keep")
    ap.add_argument("--prefix", default="", help="path prefix added to every image id, e.g. img_align_celeba/")
    args = ap.parse_args()

    keep = None
    if args.mafl:
        with open(args.mafl) as f:
            keep = {line.split()[0] for line in f if line.strip()}

    rows = []
    with open(args.landmarks) as f:
        lines = f.read().splitlines()[2:]
    for line in lines:
        parts = line.split()
        if len(parts) != 11 or (keep is not None and parts[0] not in keep):
            continue
        coords = list(map(float, parts[1:]))
        image_id = args.prefix + parts[0]
        for i in range(5):
            rows.append((image_id, i, coords[2 * i], coords[2 * i + 1]))

    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["image_id", "point_index", "x_px", "y_px"])
        w.writerows(rows)
    ids = sorted({r[0] for r in rows})
    with open(os.path.join(os.path.dirname(os.path.abspath(args.out)), "manifest.txt"), "w") as f:
        f.write("\n".join(ids) + "\n")
    print(f"{len(ids)} images, {len(rows)} points -> {args.out}")


if __name__ == "__main__":
    main()
