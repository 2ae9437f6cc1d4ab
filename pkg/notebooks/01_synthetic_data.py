"""
Synthetic shapes and their annotations
======================================

A walk through the dataset generator, COCO round trip and the augmentation
pipeline used by both training phases.
"""
import tempfile
from pathlib import Path

import numpy as np

from deyo.data import DatasetManifest, augment, generate_synthetic, load_coco, mosaic4, synthesize

############################################################
# Generate a small dataset in memory. The manifest fixes everything, so the
# same seed always gives the same pixels.

manifest = DatasetManifest(seed=7, size=8, image_size=64, density="crowded")
samples = synthesize(manifest)
for s in samples[:3]:
    print(s.id, s.image.shape, s.labels.tolist(), s.boxes.round(3).tolist())

############################################################
# Write it to disk in COCO format and read it back.

with tempfile.TemporaryDirectory() as tmp:
    root = generate_synthetic(manifest, Path(tmp) / "train")
    coco = load_coco(root / "annotations.json")
    print(len(coco.samples), "images,", sum(len(s.labels) for s in coco.samples), "boxes")
    print("identical boxes:", all(np.allclose(a.boxes, b.boxes, atol=1e-6)
                                   for a, b in zip(samples, coco.samples)))

############################################################
# Mosaic collages four images; clipped-away objects are dropped.

rng = np.random.default_rng(0)
tile = mosaic4(samples[:4], rng, out_size=64)
print("mosaic objects:", len(tile.labels), "from", sum(len(s.labels) for s in samples[:4]))

############################################################
# The per-image augmentation keeps every box inside the frame.

aug = augment(samples[0], rng)
print("boxes after augment:", aug.boxes.round(3).tolist())
