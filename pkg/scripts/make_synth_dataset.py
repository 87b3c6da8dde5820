#!/usr/bin/env python3
"""Generate a separable synthetic texture dataset for pipeline demos.

Writes three manifests sharing one image root:
  train_manifest.csv    tr_-prefixed samples for triplet training
  held_manifest.csv     te_-prefixed samples never seen in training
  support_manifest.csv  the first few training samples of each class,
                        the labelled references for few-shot evaluation
"""

import argparse
from pathlib import Path

from trisiam.datamodel import Manifest, load_manifest, save_manifest
from trisiam.synthetic import write_dataset


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True, help="dataset directory (created)")
    ap.add_argument("--n-train", type=int, default=40, help="training samples per class")
    ap.add_argument("--n-held", type=int, default=110, help="held-out samples per class")
    ap.add_argument("--support-per-class", type=int, default=5)
    ap.add_argument("--size", type=int, default=64, help="image side, multiple of 8")
    ap.add_argument("--seed", type=int, default=11)
    args = ap.parse_args()

    out = Path(args.out)
    train = write_dataset(out, args.n_train, seed=args.seed, size=args.size,
                          prefix="tr_", manifest_name="train_manifest.csv")
    held = write_dataset(out, args.n_held, seed=args.seed + 1, size=args.size,
                         prefix="te_", manifest_name="held_manifest.csv")

    m = load_manifest(train)
    by_label = m.indices_by_label()
    sel = tuple(
        m.records[i]
        for label in range(len(m.classes))
        for i in by_label[label][: args.support_per_class]
    )
    support = out / "support_manifest.csv"
    save_manifest(Manifest(m.classes, sel), support)

    print(f"train:   {train} ({len(m)} samples)")
    print(f"held:    {held} ({3 * args.n_held} samples)")
    print(f"support: {support} ({len(sel)} samples)")


if __name__ == "__main__":
    main()
