"""Train a small tokenizer and look at what it learned.

Run: python3 demos/02_tokenizer.py
About a minute on one core.
"""
import numpy as np

from mofm.config import apply_overrides, desk_profile
from mofm.data import SynthSpec, gen_corpus, prepare
from mofm.dved import codebook_stats, tokenize, train_dved
from mofm.heatmap import condense, heatmaps

prof = apply_overrides(desk_profile(), {"dved.epochs": "4"})
poses = prepare(gen_corpus(SynthSpec(per_class=40, seed=0)), prof)
u = heatmaps(poses, prof.height, prof.width, prof.sigma)

model, state = train_dved(u, prof, seed=0)
for h in state.history:
    print(f"epoch {h['epoch']}: recon {h['recon']:.4f}  kl {h['kl']:.3f}  tau {h['tau']:.3f}  "
          f"sampled-code usage {h['usage']:.2f}")

ids = tokenize(model, u)
stats = codebook_stats(ids, prof.dved.vocab)
print(f"tokenizer usage {stats['usage']:.2f} of {prof.dved.vocab} codes, perplexity {stats['perplexity']:.1f}")

# which codes fire where: background cells should share a code
grid = ids[0].reshape(prof.geometry.grid_rows, prof.geometry.grid_cols)
print("token grid of the first sequence:\n", grid)

recon = model.decode_ids(ids[:8]).data
err = np.abs(recon - condense(u[:8])).mean()
print(f"mean abs reconstruction error from hard tokens: {err:.4f}")
