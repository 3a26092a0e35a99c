"""Regenerate the PDQ conformance images and their reference hashes.

The images are procedural (numpy + Pillow only). Expected hashes come from
the reference ``pdq-photo-hasher`` binary built from facebook/ThreatExchange
(pdq/cpp), passed as the first argument:

    python3 tools/make_pdq_vectors.py /path/to/pdq-photo-hasher

Only images with both sides <= 512 px are produced, since the reference CLI
pre-resizes larger inputs with CImg before hashing.
"""
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
from PIL import Image

OUT = Path(__file__).resolve().parent.parent / "tests" / "data" / "pdq"

# name, (height, width), mode, kind
SPECS = [
    ("gradient_64", (64, 64), "L", "gradient"),
    ("blobs_96x80", (80, 96), "RGB", "blobs"),
    ("checker_128", (128, 128), "L", "checker"),
    ("blobs_128", (128, 128), "RGB", "blobs"),
    ("noise_150x200", (150, 200), "RGB", "noise"),
    ("rings_256", (256, 256), "L", "rings"),
    ("blobs_217x333", (217, 333), "RGB", "blobs"),
    ("stripes_300x180", (300, 180), "RGB", "stripes"),
    ("blobs_384x512", (384, 512), "RGB", "blobs"),
    ("noise_512", (512, 512), "L", "noise"),
    ("rings_479x301", (479, 301), "RGB", "rings"),
    ("blobs_65x71", (65, 71), "L", "blobs"),
    ("flat_128", (128, 128), "L", "flat"),
]
JPEG_FROM = ["blobs_128", "noise_150x200", "blobs_217x333", "stripes_300x180", "blobs_384x512"]


def render(shape, kind, rng):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    yy /= h
    xx /= w
    if kind == "gradient":
        base = 0.2 + 0.6 * xx * (1 - 0.5 * yy)
    elif kind == "checker":
        base = ((np.floor(xx * 6) + np.floor(yy * 5)) % 2) * 0.7 + 0.15
    elif kind == "rings":
        r = np.hypot(xx - rng.uniform(0.3, 0.7), yy - rng.uniform(0.3, 0.7))
        base = 0.5 + 0.4 * np.sin(r * rng.uniform(15, 30))
    elif kind == "stripes":
        a = rng.uniform(0, np.pi)
        base = 0.5 + 0.35 * np.sign(np.sin((xx * np.cos(a) + yy * np.sin(a)) * 20))
    elif kind == "noise":
        small = rng.uniform(size=(max(h // 16, 2), max(w // 16, 2)))
        base = np.asarray(Image.fromarray((small * 255).astype(np.uint8)).resize((w, h), Image.BICUBIC)) / 255.0
    elif kind == "flat":
        base = np.full((h, w), 0.5)
    else:  # blobs
        base = 0.3 + 0.3 * yy
        for _ in range(8):
            cy, cx = rng.uniform(0, 1, 2)
            ry, rx = rng.uniform(0.05, 0.3, 2)
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1
            base = np.where(mask, rng.uniform(0, 1), base)
    base = np.clip(base, 0, 1)
    colour = np.stack([base * rng.uniform(0.6, 1.0) + rng.uniform(0, 0.2) for _ in range(3)], axis=-1)
    colour = np.clip(colour + rng.normal(0, 0.01, colour.shape), 0, 1)
    return base, colour


def main(hasher):
    OUT.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(20240229)
    files = []
    for name, shape, mode, kind in SPECS:
        grey, colour = render(shape, kind, rng)
        arr = grey if mode == "L" else colour
        img = Image.fromarray(np.round(arr * 255).astype(np.uint8), mode)
        img.save(OUT / f"{name}.png")
        files.append(f"{name}.png")
        if name in JPEG_FROM:
            img.save(OUT / f"{name}.jpg", quality=90)
            files.append(f"{name}.jpg")
    out = subprocess.run([hasher] + [str(OUT / f) for f in files], capture_output=True, text=True, check=True)
    vectors = []
    for line in out.stdout.strip().splitlines():
        hexhash, quality, path = line.split(",")
        vectors.append({"file": Path(path).name, "hash": hexhash, "quality": int(quality)})
    (OUT / "reference_hashes.json").write_text(json.dumps(vectors, indent=1) + "\n")
    print(f"{len(vectors)} vectors written")


if __name__ == "__main__":
    main(sys.argv[1])
