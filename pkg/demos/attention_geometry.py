"""Relative-position attention on a toy point cloud.

Scores depend only on position differences, so moving every token by the same
offset leaves the attention pattern untouched. Absolute sinusoidal positions
added to the features, for contrast, do not have that property.

    python3 demos/attention_geometry.py
"""

import numpy as np

from spinemesh.attention import RelAttentionHead, TokenSet, attention_output, attention_scores
from spinemesh.autodiff import make_rng
from spinemesh.features import position_embedding

rng = np.random.default_rng(0)
head = RelAttentionHead(embed=8, d=4, rng=make_rng(1))

# six tokens on a small arc, features drawn at random
t = np.linspace(0.0, np.pi / 2, 6)
pos = 0.4 * np.stack([np.cos(t), np.sin(t)], axis=1)
feat = rng.standard_normal((6, 8))
X = TokenSet(feat, pos)

A = attention_scores(X, X, head).data
print("attention rows (each sums to one):")
print(np.round(A, 3))
print("row sums:", np.round(A.sum(axis=1), 12))

# shift the whole set
shift = np.array([0.35, -0.2])
X2 = TokenSet(feat, pos + shift)
print("\nmax score change after a rigid shift:",
      np.abs(attention_scores(X2, X2, head).data - A).max())
print("max output change after a rigid shift:",
      np.abs(attention_output(X2, X2, head).data - attention_output(X, X, head).data).max())

# absolute encoding baked into the features breaks it
def absolute(points):
    pe = position_embedding(points[None], n_freq=2).data[0]
    return TokenSet(feat + np.pad(pe, ((0, 0), (0, 8 - pe.shape[1]))), points)


B1 = attention_scores(absolute(pos), absolute(pos), head).data
B2 = attention_scores(absolute(pos + shift), absolute(pos + shift), head).data
print("same shift with absolute encodings added to features:", np.abs(B2 - B1).max())
