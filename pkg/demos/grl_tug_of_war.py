"""Watch the gradient reversal layer split one backward pass into a min-max game.

The domain discriminator descends its loss while the feature generator, sitting
behind the reversal layer, receives the same gradient with its sign flipped.

    python demos/grl_tug_of_war.py
"""

import numpy as np

from sadg import losses as L
from sadg.models import SADGModels
from sadg.tensor import Tensor

models = SADGModels.build(n_domains=3, seed=0)
images = np.random.default_rng(0).uniform(size=(6, 3, 32, 32))
domains = [0, 1, 2, 0, 1, 2]

for lam in (1.0, 0.0):
    models.zero_grad()
    loss = L.adversarial_domain_loss(models.g, models.d, Tensor(images), domains, lam)
    loss.backward()
    g_norm = sum(float(np.sum(p.grad ** 2)) for p in models.g.parameters() if p.grad is not None) ** 0.5
    d_norm = sum(float(np.sum(p.grad ** 2)) for p in models.d.parameters()) ** 0.5
    print(f"lambda={lam:.1f}  domain loss {loss.item():.4f}  |grad G| {g_norm:.3e}  |grad D| {d_norm:.3e}")

# with lambda=0 the generator is cut off; the discriminator's gradient is untouched
