"""
Keyword dispersion in the shared space
======================================

A keyword is represented by the normalised mean of the embeddings of
captions that contain it. When those captions scatter widely the mean
cosine similarity (MCS) is low and a single patch has a harder target.
This script lists MCS for every selected keyword of a small world.
"""

from tthlab.attack import build_keyword_context
from tthlab.matcher import TrainHyper, train_matcher
from tthlab.synthworld import generate_corpus, merge_corpora, select_keywords

alpha = generate_corpus(seed=2, n_train=500, n_val=20, n_test=120)
beta = generate_corpus(seed=2, n_train=500, n_val=20, n_test=120, flavor="beta")
model, _ = train_matcher(merge_corpora(alpha, beta), TrainHyper(epochs=15))

rows = []
for word, pos, freq in select_keywords(alpha, per_pos=4, seed=0):
    ctx = build_keyword_context(model, alpha, word, m=300)
    rows.append((ctx.mcs, word, pos, freq, len(ctx.sentences)))

print(f"{'keyword':10s} {'pos':10s} {'freq':>6s} {'used':>5s}  MCS")
for mcs, word, pos, freq, n in sorted(rows, reverse=True):
    print(f"{word:10s} {pos:10s} {freq:6d} {n:5d}  {mcs:.3f}")
