"""
A Trojan-horse patch on a small synthetic world
===============================================

Train a small dual encoder, build a patch for one keyword, insert the
patched carriers into the database and compare retrieval before and after.
Runs in about a minute on one core.
"""

import numpy as np

from tthlab.attack import AttackConfig, generate_trojan_set
from tthlab.matcher import TrainHyper, train_matcher, validation_r10
from tthlab.retrieval import build_index, evaluate_attack, query_topk
from tthlab.synthworld import generate_benign_set, generate_corpus, merge_corpora
from tthlab.ppm import write_ppm

# two corpus flavors; the matcher sees both, evaluation uses alpha's test split
alpha = generate_corpus(seed=1, n_train=600, n_val=40, n_test=60)
beta = generate_corpus(seed=1, n_train=600, n_val=40, n_test=60, flavor="beta")
model, log = train_matcher(merge_corpora(alpha, beta), TrainHyper(epochs=20), val_corpus=alpha)
print(f"clean test R@10: {validation_r10(model, alpha, 'test'):.1f}%")

# the carriers are advertisement-like images nobody would search for
benign = generate_benign_set(seed=1, n_h=10)

# optimise one patch for "red", starting from the beacon code
ts = generate_trojan_set(model, alpha, benign, "red", AttackConfig(iters=100, m=200))
acc, scannable = ts.scannable()
print(f"MCS of 'red' captions: {ts.context.mcs:.3f}")
print(f"beacon cells read correctly: {acc:.2f}, scannable: {scannable}")

# where does a red query land once the trojans are in the index?
items = [(it.id, it.pixels, "corpus") for it in alpha.split("test")]
items += [(f"trojan-{i:02d}", x, "trojan") for i, x in enumerate(ts.images)]
index = build_index(model, items)
caption = next(c for it in alpha.split("test") for c in it.captions if "red" in c.text.split())
print(f"query: {caption.text!r}")
for rank, (iid, score) in enumerate(query_topk(index, model, caption, 10), 1):
    print(f"  {rank:2d}. {iid:14s} {score:.3f}")

report = evaluate_attack(model, alpha, benign, {"red": ts})
row = report.rows[0]
print(f"trojan R@10 {row.trojan_r10_clean:.1f}% -> {row.trojan_r10_tth:.1f}%, "
      f"relevant R@10 {row.relevant_r10_clean:.1f}% -> {row.relevant_r10_tth:.1f}%")

write_ppm("tiny_attack_trojan.ppm", np.clip(ts.images[0], 0, 255))
