"""Regenerate tests/golden: one noise-free all-class-0 raster per image kind.

Run only after an intentional change to the rendering table or layouts.
"""

from pathlib import Path

import numpy as np

from fibronet.schema import default_image_map, default_schema
from fibronet.synth import GenConfig, encode_raster, render_image

OUT = Path(__file__).resolve().parents[1] / "tests" / "golden"


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    schema, image_map = default_schema(), default_image_map()
    cfg = GenConfig(noise_sigma=0.0)
    for kind in range(1, 11):
        labels = {i: 0 for i in image_map.indicators_for(kind)}
        img = render_image(kind, labels, np.random.default_rng(0), cfg, schema, image_map)
        (OUT / f"kind_{kind:02d}.raster").write_bytes(encode_raster(img))
        print(kind, float(img.mean()))


if __name__ == "__main__":
    main()
