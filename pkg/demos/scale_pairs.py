"""A tour of the synthetic corpus: domains, recapture artifacts and scale pairs.

Writes a handful of PPM files to ./demo_corpus so you can look at them.

    python demos/scale_pairs.py
"""

from pathlib import Path

import numpy as np

from sadg import synth

corpus = synth.generate_corpus(count_per_class=4, seed=0)
rng = np.random.default_rng(0)
out = Path("demo_corpus")
out.mkdir(exist_ok=True)

print("domain  class      mean   Laplacian(large)  Laplacian(small)")
for d in corpus.domain_ids:
    data = corpus[d]
    for i in (0, len(data) - 1):
        pair = synth.make_scale_pair(data.canvas(i), 32, rng, y=int(data.labels[i]), domain_id=d)
        name = "recapture" if data.labels[i] else "single"
        print(f"{d:6}  {name:9}  {data.canvas(i).mean():.3f}  "
              f"{synth.laplacian_energy(pair.large.image):16.4f}  {synth.laplacian_energy(pair.small.image):16.4f}")
        for tag, img in (("large", pair.large.image), ("small", pair.small.image)):
            synth.write_ppm(out / f"{d}_{name}_{tag}.ppm", synth.quantize(img))

print(f"\nwrote {len(list(out.glob('*.ppm')))} crops to {out}/")
