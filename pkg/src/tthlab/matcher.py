"""Small dual encoder mapping captions and images into one unit sphere.

Text: mean of token rows, linear projection, L2 normalisation.
Image: average pooling, pixel scaling by 1/255, optionally one tanh hidden
layer (arch "B"), linear projection, L2 normalisation. No biases, so an
all-zero image has no embedding.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DegenerateInputError, DimensionError, FormatError, TrainingError, VocabularyError
from .numerics import avg_pool, avg_pool_backward, l2_normalize, l2_normalize_backward, tanh_backward
from .synthworld import Caption, Corpus, substream

MODEL_MAGIC = "tthlab-matcher/1"


@dataclass
class MatcherModel:
    token_table: np.ndarray  # V x d_e
    text_proj: np.ndarray  # d_e x d
    img_proj: np.ndarray  # p x d (arch A) or hidden x d (arch B)
    temperature: float
    pool_factor: int
    image_shape: tuple
    arch: str = "A"
    img_hidden: np.ndarray | None = None  # p x hidden, arch B only
    seed: int = 0

    @property
    def dim(self) -> int:
        return self.text_proj.shape[1]

    @property
    def arch_tag(self) -> str:
        h, w, c = self.image_shape
        return f"{self.arch}:{h}x{w}x{c}:pool{self.pool_factor}:V{self.token_table.shape[0]}"

    def parameters(self):
        """Named parameter arrays in their fixed serialisation order."""
        params = [("token_table", self.token_table), ("text_proj", self.text_proj)]
        if self.img_hidden is not None:
            params.append(("img_hidden", self.img_hidden))
        params.append(("img_proj", self.img_proj))
        return params


def init_matcher(vocab_size: int, image_shape=(64, 64, 3), d: int = 64, d_e: int = 64,
                 pool_factor: int = 4, arch: str = "A", hidden: int = 128,
                 temperature: float = 0.07, seed: int = 0) -> MatcherModel:
    h, w, c = image_shape
    if h % pool_factor or w % pool_factor:
        raise ConfigError(f"image {h}x{w} not divisible by pool factor {pool_factor}")
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    if arch not in ("A", "B"):
        raise ConfigError(f"unknown matcher arch {arch!r}")
    p = (h // pool_factor) * (w // pool_factor) * c
    rng = substream(seed, "init", arch)
    token_table = rng.normal(0.0, 1.0, size=(vocab_size, d_e))
    text_proj = rng.normal(0.0, 1.0 / np.sqrt(d_e), size=(d_e, d))
    img_hidden = None
    if arch == "B":
        img_hidden = rng.normal(0.0, 1.0 / np.sqrt(p), size=(p, hidden))
        img_proj = rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, d))
    else:
        img_proj = rng.normal(0.0, 1.0 / np.sqrt(p), size=(p, d))
    return MatcherModel(token_table, text_proj, img_proj, float(temperature), int(pool_factor),
                        tuple(image_shape), arch, img_hidden, int(seed))


# ---------------------------------------------------------------- text side


def _token_array(model: MatcherModel, caption) -> np.ndarray:
    tokens = caption.tokens if isinstance(caption, Caption) else caption
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size == 0:
        raise DegenerateInputError("empty caption")
    if tokens.min() < 0 or tokens.max() >= model.token_table.shape[0]:
        raise VocabularyError("caption token outside the model vocabulary")
    return tokens


def embed_text(model: MatcherModel, caption) -> np.ndarray:
    tokens = _token_array(model, caption)
    pooled = model.token_table[tokens].mean(axis=0)
    return l2_normalize(pooled @ model.text_proj)


def embed_texts(model: MatcherModel, captions) -> np.ndarray:
    """Row-stacked embeddings for a list of captions."""
    if len(captions) == 0:
        return np.zeros((0, model.dim))
    pooled = np.stack([model.token_table[_token_array(model, c)].mean(axis=0) for c in captions])
    return l2_normalize(pooled @ model.text_proj)


# ---------------------------------------------------------------- image side


def _check_images(model: MatcherModel, images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.shape[-3:] != tuple(model.image_shape):
        raise DimensionError(f"image shape {images.shape[-3:]} does not match model {model.image_shape}")
    return images


def image_features(model: MatcherModel, images: np.ndarray) -> np.ndarray:
    """Pooled, scaled and flattened pixels, shape (..., p)."""
    images = _check_images(model, images)
    pooled = avg_pool(images, model.pool_factor) / 255.0
    return pooled.reshape(*pooled.shape[:-3], -1)


def _image_forward(model: MatcherModel, feats: np.ndarray):
    if model.img_hidden is not None:
        hidden = np.tanh(feats @ model.img_hidden)
        return hidden, hidden @ model.img_proj
    return None, feats @ model.img_proj


def embed_images(model: MatcherModel, images: np.ndarray) -> np.ndarray:
    feats = image_features(model, images)
    _, u = _image_forward(model, feats)
    return l2_normalize(u)


def embed_image(model: MatcherModel, image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise DimensionError(f"expected one HxWxC image, got shape {image.shape}")
    return embed_images(model, image)


def similarity(model: MatcherModel, caption, image) -> float:
    return float(np.clip(embed_text(model, caption) @ embed_image(model, image), -1.0, 1.0))


def image_embedding_input_grad(model: MatcherModel, images: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient of ``upstream . e(x)`` with respect to every pixel of ``x``.

    Works on one image (H, W, C) with upstream (d,) or on a batch
    (N, H, W, C) with upstream (N, d).
    """
    images = _check_images(model, images)
    upstream = np.asarray(upstream, dtype=np.float64)
    feats = image_features(model, images)
    hidden, u = _image_forward(model, feats)
    g_u = l2_normalize_backward(u, upstream)
    if hidden is not None:
        g_feat = tanh_backward(hidden, g_u @ model.img_proj.T) @ model.img_hidden.T
    else:
        g_feat = g_u @ model.img_proj.T
    h, w, c = model.image_shape
    pf = model.pool_factor
    g_pooled = g_feat.reshape(*g_feat.shape[:-1], h // pf, w // pf, c) / 255.0
    return avg_pool_backward(g_pooled, pf)


# ---------------------------------------------------------------- training


@dataclass
class TrainLog:
    epochs: int
    losses: list = field(default_factory=list)
    val_r10: float = float("nan")


def _contrastive_step(model: MatcherModel, feats, token_lists, lr: float):
    """One symmetric InfoNCE gradient step on a batch; returns the loss."""
    n = feats.shape[0]
    tau = model.temperature
    # text forward
    lengths = np.array([len(t) for t in token_lists], dtype=np.float64)
    flat = np.concatenate(token_lists)
    owner = np.repeat(np.arange(n), lengths.astype(np.int64))
    pooled = np.zeros((n, model.token_table.shape[1]))
    np.add.at(pooled, owner, model.token_table[flat])
    pooled /= lengths[:, None]
    ut = pooled @ model.text_proj
    et = l2_normalize(ut)
    # image forward
    hidden, ui = _image_forward(model, feats)
    ei = l2_normalize(ui)

    logits = (et @ ei.T) / tau
    row = logits - logits.max(axis=1, keepdims=True)
    p_row = np.exp(row)
    p_row /= p_row.sum(axis=1, keepdims=True)
    col = logits - logits.max(axis=0, keepdims=True)
    p_col = np.exp(col)
    p_col /= p_col.sum(axis=0, keepdims=True)
    diag = np.arange(n)
    loss = -0.5 * (np.log(p_row[diag, diag]).mean() + np.log(p_col[diag, diag]).mean())
    if not np.isfinite(loss):
        raise TrainingError("contrastive loss diverged")

    eye = np.eye(n)
    g_logits = 0.5 * ((p_row - eye) + (p_col - eye)) / n
    g_et = g_logits @ ei / tau
    g_ei = g_logits.T @ et / tau

    g_ut = l2_normalize_backward(ut, g_et)
    g_text_proj = pooled.T @ g_ut
    g_pooled = g_ut @ model.text_proj.T / lengths[:, None]
    g_table = np.zeros_like(model.token_table)
    np.add.at(g_table, flat, g_pooled[owner])

    g_ui = l2_normalize_backward(ui, g_ei)
    if hidden is not None:
        g_img_proj = hidden.T @ g_ui
        g_z = tanh_backward(hidden, g_ui @ model.img_proj.T)
        model.img_hidden -= lr * (feats.T @ g_z)
    else:
        g_img_proj = feats.T @ g_ui
    model.img_proj -= lr * g_img_proj
    model.text_proj -= lr * g_text_proj
    model.token_table -= lr * g_table
    return float(loss)


@dataclass(frozen=True)
class TrainHyper:
    d: int = 64
    d_e: int = 64
    pool_factor: int = 4
    lr: float = 1.0
    epochs: int = 60
    batch: int = 64
    seed: int = 0
    temperature: float = 0.07
    arch: str = "A"
    hidden: int = 128


def train_matcher(corpus: Corpus, hyper: TrainHyper | None = None, val_corpus: Corpus | None = None):
    """Contrastive training with plain mini-batch gradient descent.

    Each epoch visits every training image once, paired with one of its
    captions drawn at random. Returns ``(model, TrainLog)``; the log's
    ``val_r10`` is caption-to-image R@10 (percent) on the validation split.
    """
    hyper = hyper or TrainHyper()
    train = corpus.split("train")
    if not train:
        raise ConfigError("corpus has no training images")
    shape = train[0].pixels.shape
    model = init_matcher(len(corpus.vocab), shape, hyper.d, hyper.d_e, hyper.pool_factor,
                         hyper.arch, hyper.hidden, hyper.temperature, hyper.seed)
    feats = image_features(model, np.stack([it.pixels for it in train]).astype(np.float64))
    tokens = [[np.asarray(c.tokens, dtype=np.int64) for c in it.captions] for it in train]
    rng = substream(hyper.seed, "train", hyper.arch)
    log = TrainLog(hyper.epochs)
    for _ in range(hyper.epochs):
        order = rng.permutation(len(train))
        picks = rng.integers(0, 1 << 30, size=len(train))
        total, count = 0.0, 0
        for start in range(0, len(order), hyper.batch):
            idx = order[start:start + hyper.batch]
            if len(idx) < 2:
                continue
            toks = [tokens[i][picks[i] % len(tokens[i])] for i in idx]
            total += _contrastive_step(model, feats[idx], toks, hyper.lr) * len(idx)
            count += len(idx)
        log.losses.append(total / count)
    log.val_r10 = validation_r10(model, val_corpus or corpus, "val")
    return model, log


def validation_r10(model: MatcherModel, corpus: Corpus, split: str = "val", k: int = 10) -> float:
    """Percentage of captions whose source image is in the top ``k`` of the split."""
    items = corpus.split(split)
    if not items:
        return float("nan")
    img_emb = embed_images(model, np.stack([it.pixels for it in items]).astype(np.float64))
    caps, owners = [], []
    for j, it in enumerate(items):
        for c in it.captions:
            caps.append(c)
            owners.append(j)
    scores = embed_texts(model, caps) @ img_emb.T
    owners = np.asarray(owners)
    own = scores[np.arange(len(owners)), owners]
    # strictly better competitors; ties resolved in the source's favour only if its index is lower
    better = (scores > own[:, None]).sum(axis=1)
    ties = ((scores == own[:, None]) & (np.arange(len(items))[None, :] < owners[:, None])).sum(axis=1)
    return float(100.0 * np.mean(better + ties < k))


# ---------------------------------------------------------------- persistence


def save_model(model: MatcherModel, path) -> None:
    """JSON header line, then little-endian float64 parameters in declared order."""
    header = {
        "magic": MODEL_MAGIC,
        "arch": model.arch,
        "arch_tag": model.arch_tag,
        "temperature": model.temperature,
        "pool_factor": model.pool_factor,
        "image_shape": list(model.image_shape),
        "seed": model.seed,
        "params": [[name, list(arr.shape)] for name, arr in model.parameters()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in model.parameters():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path, expected_tag: str | None = None) -> MatcherModel:
    data = Path(path).read_bytes()
    try:
        (hlen,) = struct.unpack_from("<Q", data, 0)
        header = json.loads(data[8:8 + hlen].decode("utf-8"))
        if header.get("magic") != MODEL_MAGIC:
            raise FormatError(f"{path}: not a matcher model file")
        offset = 8 + hlen
        arrays = {}
        for name, shape in header["params"]:
            count = int(np.prod(shape))
            chunk = data[offset:offset + 8 * count]
            if len(chunk) != 8 * count:
                raise FormatError(f"{path}: truncated parameter block {name}")
            arrays[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64)
            offset += 8 * count
        if offset != len(data):
            raise FormatError(f"{path}: trailing bytes after parameters")
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise FormatError(f"{path}: malformed model file ({exc})") from exc
    model = MatcherModel(
        token_table=arrays["token_table"],
        text_proj=arrays["text_proj"],
        img_proj=arrays["img_proj"],
        temperature=float(header["temperature"]),
        pool_factor=int(header["pool_factor"]),
        image_shape=tuple(header["image_shape"]),
        arch=header["arch"],
        img_hidden=arrays.get("img_hidden"),
        seed=int(header["seed"]),
    )
    if not all(np.all(np.isfinite(a)) for _, a in model.parameters()):
        raise FormatError(f"{path}: non-finite parameters")
    if expected_tag is not None and model.arch_tag != expected_tag:
        raise ConfigError(f"model {model.arch_tag} does not fit world config {expected_tag}")
    return model
