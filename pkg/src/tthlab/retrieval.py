"""Exhaustive text-to-image retrieval and the with/without-trojan evaluation.

The index is a dense matrix of unit embeddings scanned in full for every
query. Ranking is by descending cosine, ties going to the smaller id, so
every ranking is a total order and reproducible.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .errors import ConfigError, DegenerateInputError, DimensionError, IdError, KeywordError
from .matcher import MatcherModel, embed_images, embed_text, embed_texts
from .synthworld import Corpus

ORIGINS = ("corpus", "benign", "trojan")
MODES = ("white-box", "surrogate-dataset", "surrogate-model")


# ---------------------------------------------------------------- index


@dataclass(frozen=True)
class RetrievalIndex:
    ids: tuple
    embeddings: np.ndarray  # n x d, unit rows
    origins: tuple
    model_tag: str
    # position of each entry in ascending-id order, used as the tie-break key
    id_rank: np.ndarray = field(repr=False, default=None)

    def __len__(self):
        return len(self.ids)


def build_index(model: MatcherModel, images) -> RetrievalIndex:
    """Embed ``(id, image, origin)`` triples in the given order."""
    images = list(images)
    ids = tuple(str(i) for i, _, _ in images)
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise IdError(f"duplicate index ids: {dup[:5]}")
    origins = tuple(o for _, _, o in images)
    bad = [o for o in origins if o not in ORIGINS]
    if bad:
        raise ConfigError(f"unknown origin {bad[0]!r}")
    if images:
        emb = embed_images(model, np.stack([np.asarray(x, dtype=np.float64) for _, x, _ in images]))
    else:
        emb = np.zeros((0, model.dim))
    rank = np.empty(len(ids), dtype=np.int64)
    rank[np.argsort(np.array(ids, dtype=object), kind="stable")] = np.arange(len(ids))
    return RetrievalIndex(ids, emb, origins, model.arch_tag, rank)


def rank_rows(scores: np.ndarray, id_rank: np.ndarray, k: int) -> np.ndarray:
    """Top-``k`` column indices per row: descending score, then ascending id."""
    scores = np.atleast_2d(scores)
    keys = np.broadcast_to(id_rank, scores.shape)
    order = np.lexsort((keys, -scores), axis=-1)
    return order[:, :k]


def query_topk(index: RetrievalIndex, model: MatcherModel, caption, k: int):
    """Ranked ``(id, score)`` list of the ``k`` best entries for one caption."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    if len(index) == 0:
        raise DegenerateInputError("cannot query an empty index")
    q = embed_text(model, caption)
    if q.shape[0] != index.embeddings.shape[1]:
        raise DimensionError("query and index embeddings differ in dimension")
    scores = index.embeddings @ q
    top = rank_rows(scores, index.id_rank, k)[0]
    return [(index.ids[j], float(scores[j])) for j in top]


def recall_at_k(rankings, relevant, k: int) -> float:
    """Percentage of queries with at least one relevant id among their first ``k`` ids."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    rankings = list(rankings)
    relevant = list(relevant)
    if not rankings:
        raise DegenerateInputError("recall over an empty query set")
    if len(rankings) != len(relevant):
        raise DimensionError("one relevant-id set is needed per ranking")
    hits = 0
    for ranked, rel in zip(rankings, relevant):
        top = [r[0] if isinstance(r, tuple) else r for r in list(ranked)[:k]]
        hits += any(i in rel for i in top)
    return 100.0 * hits / len(rankings)


# ---------------------------------------------------------------- queries


@dataclass
class QuerySet:
    keyword: str
    queries: list  # (Caption, frozenset of relevant image ids)


def build_query_set(corpus: Corpus, split: str, keyword: str) -> QuerySet:
    """Every ``split`` caption containing ``keyword``; relevant = its source image."""
    token = corpus.token(keyword)
    queries = [(c, frozenset([iid])) for iid, c in corpus.captions(split) if token in c.tokens]
    if not queries:
        raise KeywordError(f"keyword {keyword!r} does not occur in the {split} split")
    return QuerySet(keyword, queries)


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalRow:
    keyword: str
    relevant_r10_clean: float
    relevant_r10_tth: float
    trojan_r10_clean: float
    trojan_r10_tth: float
    mcs: float = float("nan")

    FIELDS = ("relevant_r10_clean", "relevant_r10_tth", "trojan_r10_clean", "trojan_r10_tth")


@dataclass
class EvalReport:
    rows: list
    mean_row: EvalRow
    setup: dict
    rankings: dict = field(default_factory=dict)  # keyword -> condition -> list of top-k id lists

    def spearman_mcs(self) -> float:
        """Rank correlation between keyword MCS and attacked trojan R10."""
        mcs = [r.mcs for r in self.rows]
        r10 = [r.trojan_r10_tth for r in self.rows]
        if len(self.rows) < 3 or np.ptp(mcs) == 0 or np.ptp(r10) == 0:
            return float("nan")
        return float(spearmanr(mcs, r10).statistic)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["keyword", *EvalRow.FIELDS, "mcs"])
        for r in [*self.rows, self.mean_row]:
            w.writerow([r.keyword, *(f"{getattr(r, f):.4f}" for f in EvalRow.FIELDS), _fmt(r.mcs)])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {"setup": self.setup, "rows": [asdict(r) for r in self.rows],
               "mean": asdict(self.mean_row), "spearman_mcs_trojan_r10": self.spearman_mcs()}
        return json.dumps(doc, indent=1, sort_keys=True, default=_json_default) + "\n"


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6f}"


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o)}")


def mean_row(rows) -> EvalRow:
    if not rows:
        raise DegenerateInputError("no rows to average")
    vals = {f: float(np.mean([getattr(r, f) for r in rows])) for f in EvalRow.FIELDS}
    mcs = [r.mcs for r in rows if not math.isnan(r.mcs)]
    return EvalRow("MEAN", **vals, mcs=float(np.mean(mcs)) if mcs else float("nan"))


def _condition(eval_model, test_items, extra, extra_origin, queries, k):
    index = build_index(eval_model, [(it.id, it.pixels, "corpus") for it in test_items] + [
        (f"{extra_origin}-{i:02d}", x, extra_origin) for i, x in enumerate(extra)])
    q = embed_texts(eval_model, [c for c, _ in queries])
    top = rank_rows(q @ index.embeddings.T, index.id_rank, k)
    ranked = [[index.ids[j] for j in row] for row in top]
    extra_ids = {i for i, o in zip(index.ids, index.origins) if o == extra_origin}
    rel = recall_at_k(ranked, [r for _, r in queries], k)
    novel = recall_at_k(ranked, [extra_ids] * len(queries), k)
    return rel, novel, ranked


def evaluate_attack(eval_model: MatcherModel, corpus: Corpus, benign, trojan_sets: dict,
                    keywords=None, k: int = 10, split: str = "test", setup=None,
                    keep_rankings: bool = False) -> EvalReport:
    """Relevant and novel-image R@k per keyword, without and with the trojans.

    The clean index holds the ``split`` images plus the un-patched carriers;
    the attacked index swaps the carriers for the keyword's trojan images.
    Rows are sorted by attacked novel R@k, highest first.
    """
    keywords = list(keywords) if keywords is not None else list(trojan_sets)
    test_items = corpus.split(split)
    benign_images = benign.stack() if hasattr(benign, "stack") else np.asarray(benign)
    rows, rankings = [], {}
    for kw in keywords:
        if kw not in trojan_sets:
            raise ConfigError(f"no trojan set for keyword {kw!r}")
        ts = trojan_sets[kw]
        queries = build_query_set(corpus, split, kw).queries
        rel_c, nov_c, rank_c = _condition(eval_model, test_items, benign_images, "benign", queries, k)
        rel_t, nov_t, rank_t = _condition(eval_model, test_items, ts.images, "trojan", queries, k)
        mcs = ts.context.mcs if getattr(ts, "context", None) is not None else float("nan")
        rows.append(EvalRow(kw, rel_c, rel_t, nov_c, nov_t, mcs))
        if keep_rankings:
            rankings[kw] = {"clean": rank_c, "tth": rank_t}
    rows.sort(key=lambda r: (-r.trojan_r10_tth, r.keyword))
    return EvalReport(rows, mean_row(rows), dict(setup or {}), rankings)


# ---------------------------------------------------------------- experiments


def _lab(config, lab):
    if lab is not None:
        return lab
    from .pipeline import Lab
    return Lab(config)


def run_report(lab, mode: str, attack_arch: str, eval_arch: str, context_flavor: str,
               keywords=None) -> EvalReport:
    keywords = keywords or lab.keywords()
    cfg = lab.config
    trojans = {kw: lab.trojan_set(attack_arch, kw, context_flavor) for kw in keywords}
    setup = {"mode": mode, "attack_net": attack_arch, "eval_net": eval_arch,
             "training_corpus": f"{context_flavor}-train", "eval_corpus": f"{cfg.world.flavor}-test",
             "config_digest": cfg.digest()}
    return evaluate_attack(lab.model(eval_arch), lab.corpus(), lab.benign(), trojans, keywords,
                           cfg.eval.k, setup=setup, keep_rankings=cfg.eval.dump_rankings)


def run_experiment_matrix(config=None, lab=None, archs=None, keywords=None) -> list:
    """White-box, surrogate-dataset and surrogate-model reports.

    White-box and surrogate-dataset reports come for every arch; the
    surrogate-model reports cover each ordered pair of distinct archs.
    """
    lab = _lab(config, lab)
    cfg = lab.config
    archs = list(archs) if archs is not None else sorted(cfg.models)
    home, other = cfg.world.flavor, cfg.world.surrogate_flavor
    reports = [run_report(lab, "white-box", a, a, home, keywords) for a in archs]
    reports += [run_report(lab, "surrogate-dataset", a, a, other, keywords) for a in archs]
    reports += [run_report(lab, "surrogate-model", a, b, home, keywords)
                for a in archs for b in archs if a != b]
    return reports


@dataclass
class LambdaPoint:
    lam: float
    seed: int
    keyword: str
    trojan_r10: float
    cell_accuracy: float
    scannable: bool
    distance: float  # normalised squared distance to the beacon


def ablate_lambda(config=None, lambdas=None, lab=None, keywords=None, seeds=None, arch: str = "A"):
    """Attack per (seed, lambda, keyword) and report attack strength against beacon legibility.

    The seed picks the carrier set and the caption sample behind the keyword
    embedding.
    """
    lab = _lab(config, lab)
    cfg = lab.config
    lambdas = list(lambdas) if lambdas is not None else list(cfg.eval.lambdas)
    if any(lam < 0 for lam in lambdas):
        raise ConfigError("lambda values must be >= 0")
    keywords = keywords or cfg.eval.ablation_keywords or lab.keywords()[:4]
    seeds = list(seeds) if seeds is not None else list(cfg.eval.ablation_seeds)
    model = lab.model(arch)
    points = []
    for seed in seeds:
        benign = lab.benign(seed)
        for lam in lambdas:
            for kw in keywords:
                ts = lab.trojan_set(arch, kw, benign_seed=seed, lam=float(lam), seed=seed)
                row = evaluate_attack(model, lab.corpus(), benign, {kw: ts}, [kw], cfg.eval.k).rows[0]
                acc, ok = ts.scannable()
                dist = float(np.sum((ts.patch.delta - ts.patch.delta_o) ** 2)
                             / (ts.patch.delta.shape[0] * ts.patch.delta.shape[1] * 255.0 ** 2))
                points.append(LambdaPoint(float(lam), seed, kw, row.trojan_r10_tth, acc, bool(ok), dist))
    return points


@dataclass
class RatioPoint:
    ratio: float
    trojan_r10: float
    keywords: tuple


def ablate_patch_ratio(config=None, ratios=None, lab=None, keywords=None, arch: str = "A"):
    """Mean attacked novel R@k over a keyword subset, per patch ratio."""
    lab = _lab(config, lab)
    cfg = lab.config
    ratios = list(ratios) if ratios is not None else list(cfg.eval.ratios)
    if any(not 0 < r < 1 for r in ratios):
        raise ConfigError("patch ratios must be in (0, 1)")
    keywords = tuple(keywords or cfg.eval.ablation_keywords or lab.keywords()[:4])
    model = lab.model(arch)
    out = []
    for ratio in ratios:
        trojans = {kw: lab.trojan_set(arch, kw, ratio=float(ratio)) for kw in keywords}
        rep = evaluate_attack(model, lab.corpus(), lab.benign(), trojans, keywords, cfg.eval.k)
        out.append(RatioPoint(float(ratio), rep.mean_row.trojan_r10_tth, keywords))
    return out


def table_csv(points) -> str:
    """CSV with one row per dataclass instance, header from the field names."""
    points = list(points)
    if not points:
        return ""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = list(asdict(points[0]))
    w.writerow(names)
    for p in points:
        w.writerow([_cell(v) for v in asdict(p).values()])
    return buf.getvalue()


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return " ".join(map(str, v))
    return str(v)


# ---------------------------------------------------------------- embedding dump


def dump_embeddings(model: MatcherModel, corpus: Corpus, trojan_set, keyword: str, path=None,
                    split: str = "test") -> str:
    """CSV of (id, origin, e_0..e_{d-1}) for test images, keyword captions and trojans.

    Floats are written with 17 significant digits so they read back exactly.
    """
    items = corpus.split(split)
    qs = build_query_set(corpus, split, keyword).queries
    blocks = [
        ([it.id for it in items], "image", embed_images(model, np.stack([it.pixels for it in items]))),
        ([f"caption-{i:04d}" for i in range(len(qs))], "keyword-text", embed_texts(model, [c for c, _ in qs])),
        ([f"trojan-{i:02d}" for i in range(len(trojan_set.images))], "trojan",
         embed_images(model, trojan_set.images)),
    ]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "origin"] + [f"e{i}" for i in range(model.dim)])
    for ids, origin, emb in blocks:
        for i, row in zip(ids, emb):
            w.writerow([i, origin] + [f"{v:.17g}" for v in row])
    text = buf.getvalue()
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8", newline="")
    return text


def read_embeddings(path):
    """Inverse of ``dump_embeddings``: (ids, origins, float64 matrix)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DegenerateInputError(f"{path} is empty")
    ids = [r[0] for r in rows[1:]]
    origins = [r[1] for r in rows[1:]]
    mat = np.array([[float(v) for v in r[2:]] for r in rows[1:]], dtype=np.float64)
    return ids, origins, mat
