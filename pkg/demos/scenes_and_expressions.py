"""Walk through the synthetic grounding data.

Draws a handful of scenes, prints the expression generated for each
setting and writes a contact sheet of image / target-mask pairs.
"""
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from dmmi.synthetic import DatasetConfig, generate_split
from dmmi.text import chunk_entity_phrases, template_vocab, tokenize

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)

cfg = DatasetConfig(n_train=12, n_test=1, seed=5)
samples = generate_split(cfg, "train")
vocab = template_vocab()

for s in samples:
    spans = chunk_entity_phrases(tokenize(s.expression, vocab), vocab)
    words = s.expression.split()
    phrases = [" ".join(words[a:b]) for a, b in spans]
    print(f"{s.sample_id}  {s.setting:12s} delta={s.delta}  {s.expression!r}")
    print(f"    entity phrases {phrases}, targets {sorted(s.target_ids)}, mask pixels {int(s.mask.sum())}")

# one row per sample: image | mask
rows = []
for s in samples:
    img = (s.image * 255).round().astype(np.uint8)
    mask = np.repeat(s.mask[..., None] * 255, 3, axis=-1).astype(np.uint8)
    rows.append(np.concatenate([img, np.full((img.shape[0], 2, 3), 255, np.uint8), mask], axis=1))
sheet = np.concatenate(rows, axis=0)
Image.fromarray(sheet).resize((sheet.shape[1] * 3, sheet.shape[0] * 3), Image.NEAREST).save(out / "scenes.png")
print(f"wrote {out / 'scenes.png'}")
