"""
Building a one-vs-rest seed-purity task
=======================================

Each rice variety becomes its own binary problem: all of its images are
positives and an equal-sized random draw from the other varieties are
negatives. File lists stand in for the images here.
"""

from hybridkd.data_pipeline import (
    RICE_SEED_TABLE, DatasetManifest, OneVsRestSpec, Sample, assign_splits, build_one_vs_rest,
)

names = sorted(RICE_SEED_TABLE)
samples = [Sample(f"{name}/{i:05d}.jpg", label)
           for label, name in enumerate(names) for i in range(RICE_SEED_TABLE[name][0])]
manifest = DatasetManifest(names, samples)
print(f"{len(names)} varieties, {len(samples)} images")

for target in names:
    positives, negatives = RICE_SEED_TABLE[target]
    task = build_one_vs_rest(manifest, OneVsRestSpec(target, seed=0, num_negatives=negatives))
    rest, pos = task.class_counts()
    sources = {s.path.split("/")[0] for s in task.samples if s.label == 0}
    print(f"{target:13s} positives {pos:5d}  negatives {rest:5d}  "
          f"(drawn from {len(sources)} varieties)")

# Splits are stratified per class with largest-remainder rounding.
xi = assign_splits(build_one_vs_rest(manifest, OneVsRestSpec("Xi-23", num_negatives=2239)),
                   (0.8, 0.1, 0.1), seed=0)
for split in ("train", "val", "test"):
    print(split, xi.class_counts(split))
