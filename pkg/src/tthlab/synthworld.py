"""Procedural scene/caption corpus and the benign carrier images.

Scenes are small grids of coloured shapes, each carrying a motion mark;
captions are rendered from a handful of templates and always describe the
scene truthfully. Two corpus flavors differ in background texture, object
count and template mix so that a patch built on one flavor can be
evaluated on the other.
"""

from __future__ import annotations

import json
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, SpecError, VocabularyError
from .ppm import quantize, read_ppm, write_ppm

SHAPES = ("square", "circle", "triangle", "cross", "ring", "bar", "pillar", "diamond")
COLORS = {
    "red": (220, 40, 40),
    "green": (40, 190, 60),
    "blue": (50, 70, 235),
    "yellow": (235, 220, 50),
    "purple": (150, 50, 200),
    "orange": (245, 140, 30),
    "cyan": (40, 210, 220),
    "pink": (245, 130, 195),
}
VERBS = ("resting", "floating", "falling", "sliding", "shaking", "spinning", "bouncing", "glowing")
STOPWORDS = ("a", "and", "there", "is", "with", "this", "image", "shows")

# motion marks: white blocks on the 4x4 sub-grid of a cell
VERB_MARKS = {
    "resting": (),
    "floating": ((0, 1), (0, 2)),
    "falling": ((3, 1), (3, 2)),
    "sliding": ((1, 0), (2, 0)),
    "shaking": ((1, 3), (2, 3)),
    "spinning": ((0, 0), (3, 3)),
    "bouncing": ((0, 3), (3, 0)),
    "glowing": ((0, 0), (0, 3), (3, 0), (3, 3)),
}
MARK_COLOR = (255, 255, 255)

POS_ORDER = ("noun", "verb", "adjective")


def build_vocab():
    words = list(STOPWORDS) + list(COLORS) + list(SHAPES) + list(VERBS)
    lexicon = {w: "stopword" for w in STOPWORDS}
    lexicon.update({w: "adjective" for w in COLORS})
    lexicon.update({w: "noun" for w in SHAPES})
    lexicon.update({w: "verb" for w in VERBS})
    return words, lexicon


@dataclass(frozen=True)
class WorldParams:
    image_size: int = 64
    grid: int = 4
    max_objects: int = 3
    captions_per_image: int = 5
    subset_caption_rate: float = 0.1
    max_caption_tokens: int = 12

    def validate(self):
        if self.image_size < 32 or self.image_size % self.grid:
            raise ConfigError("image_size must be >= 32 and divisible by grid")
        if not 1 <= self.max_objects <= self.grid * self.grid:
            raise ConfigError("max_objects out of range")
        if self.captions_per_image < 1:
            raise ConfigError("captions_per_image must be >= 1")


@dataclass(frozen=True)
class Flavor:
    name: str
    textures: tuple
    object_count_probs: tuple
    template_weights: tuple
    # rank orders: index i of the tuple gets the i-th largest prior weight
    shape_rank: tuple
    color_rank: tuple
    verb_rank: tuple


FLAVORS = {
    "alpha": Flavor(
        "alpha", (0, 1, 2), (0.4, 0.4, 0.2), (0.5, 0.3, 0.2),
        SHAPES, tuple(COLORS), VERBS,
    ),
    "beta": Flavor(
        "beta", (3, 4, 5), (0.25, 0.45, 0.3), (0.2, 0.3, 0.5),
        SHAPES[3:] + SHAPES[:3], tuple(COLORS)[5:] + tuple(COLORS)[:5], VERBS[2:] + VERBS[:2],
    ),
}


def _zipf(n: int) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1)
    return w / w.sum()


def substream(seed: int, *names) -> np.random.Generator:
    """Independent generator keyed by ``seed`` and a path of names/ints."""
    key = [int(seed) & 0xFFFFFFFF]
    for n in names:
        key.append(n if isinstance(n, int) else zlib.crc32(str(n).encode()))
    return np.random.default_rng(key)


# ---------------------------------------------------------------- scenes


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    motion: str
    cell: tuple


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    objects: tuple
    background: int

    def to_json(self):
        return {
            "seed": self.seed,
            "background": self.background,
            "objects": [[o.shape, o.color, o.motion, list(o.cell)] for o in self.objects],
        }

    @classmethod
    def from_json(cls, d):
        objs = tuple(SceneObject(s, c, m, tuple(cell)) for s, c, m, cell in d["objects"])
        return cls(int(d["seed"]), objs, int(d["background"]))


def _shape_mask(shape: str, cell: int) -> np.ndarray:
    # coordinates in units of a 16-px cell, centred at 7.5
    t = (np.arange(cell) + 0.5) * (16.0 / cell) - 0.5
    dy, dx = np.meshgrid(t - 7.5, t - 7.5, indexing="ij")
    ady, adx = np.abs(dy), np.abs(dx)
    r2 = dx * dx + dy * dy
    if shape == "square":
        return (adx <= 5) & (ady <= 5)
    if shape == "circle":
        return r2 <= 36
    if shape == "triangle":
        return (dy >= -5.5) & (dy <= 5.5) & (adx <= (dy + 5.5) / 1.8)
    if shape == "cross":
        return ((adx <= 1.5) & (ady <= 6)) | ((ady <= 1.5) & (adx <= 6))
    if shape == "ring":
        return (r2 >= 3.5 ** 2) & (r2 <= 6.5 ** 2)
    if shape == "bar":
        return (ady <= 2.5) & (adx <= 6.5)
    if shape == "pillar":
        return (adx <= 2.5) & (ady <= 6.5)
    if shape == "diamond":
        return adx + ady <= 6.5
    raise SpecError(f"unknown shape {shape!r}")


def _background(texture: int, seed: int, h: int, w: int) -> np.ndarray:
    """Dark backdrop; textures 0-2 are mottled noise, 3-5 add diagonal stripes."""
    rng = substream(seed, "background")
    if texture not in (0, 1, 2, 3, 4, 5):
        raise SpecError(f"unknown background texture {texture}")
    level = rng.uniform(10, 50)
    tint = rng.uniform(-8, 8, size=3)
    img = level + tint + rng.normal(0.0, (4.0, 6.0, 8.0)[texture % 3], size=(h, w, 3))
    if texture >= 3:
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        period = (8.0, 6.0, 10.0)[texture % 3]
        img += (8.0 * np.sin((xx + yy) * (2 * np.pi / period) + rng.uniform(0, 2 * np.pi)))[..., None]
    return img


def render_scene(spec: SceneSpec, size=(64, 64), grid: int = 4) -> np.ndarray:
    """Draw a scene as an HxWx3 float image with integer values in [0, 255]."""
    h, w = (size, size) if np.isscalar(size) else size
    if h < 32 or w < 32:
        raise SpecError("scene images must be at least 32x32")
    if h % grid or w % grid or h != w:
        raise SpecError("square images divisible by the grid are required")
    cells = [tuple(o.cell) for o in spec.objects]
    if len(set(cells)) != len(cells):
        raise SpecError(f"overlapping cells in scene: {cells}")
    cell = h // grid
    img = _background(spec.background, spec.seed, h, w)
    for obj in spec.objects:
        r, c = obj.cell
        if not (0 <= r < grid and 0 <= c < grid):
            raise SpecError(f"cell {obj.cell} outside the {grid}x{grid} grid")
        if obj.color not in COLORS or obj.motion not in VERB_MARKS:
            raise SpecError(f"unknown attribute in {obj}")
        window = img[r * cell:(r + 1) * cell, c * cell:(c + 1) * cell]
        window[_shape_mask(obj.shape, cell)] = COLORS[obj.color]
        b = cell // 4
        for br, bc in VERB_MARKS[obj.motion]:
            window[br * b:(br + 1) * b, bc * b:(bc + 1) * b] = MARK_COLOR
    return quantize(img).astype(np.float64)


# ---------------------------------------------------------------- captions


@dataclass(frozen=True)
class Caption:
    tokens: tuple
    text: str


def make_caption(words, vocab_index) -> Caption:
    try:
        tokens = tuple(vocab_index[w] for w in words)
    except KeyError as exc:
        raise VocabularyError(f"word {exc.args[0]!r} not in vocabulary") from None
    return Caption(tokens, " ".join(words))


def _caption_words(objs, template: int, max_tokens: int):
    with_verb = [True] * len(objs)

    def build():
        words = []
        for i, o in enumerate(objs):
            phrase = [o.color, o.shape]
            if template == 0:
                phrase = ["a"] + phrase + ([o.motion] if with_verb[i] else [])
                words += (["and"] if i else []) + phrase
            elif template == 1:
                phrase = phrase + ([o.motion] if with_verb[i] else [])
                words += (["there", "is", "a"] if i == 0 else ["with"]) + phrase
            else:
                phrase = ([o.motion] if with_verb[i] else []) + phrase
                words += (["this", "image", "shows"] if i == 0 else ["and"]) + phrase
        return words

    words = build()
    i = len(objs) - 1
    while len(words) > max_tokens and i > 0:
        with_verb[i] = False
        words = build()
        i -= 1
    return words


# ---------------------------------------------------------------- corpus


@dataclass
class CorpusItem:
    id: str
    split: str
    scene: SceneSpec
    captions: list
    pixels: np.ndarray = field(repr=False)  # uint8 HxWx3

    @property
    def image(self) -> np.ndarray:
        return self.pixels.astype(np.float64)


@dataclass
class Corpus:
    flavor: str
    seed: int
    params: WorldParams
    vocab: list
    pos_lexicon: dict
    items: list

    @property
    def vocab_index(self):
        return {w: i for i, w in enumerate(self.vocab)}

    def split(self, name: str):
        return [it for it in self.items if it.split == name]

    def captions(self, split: str | None = None):
        """(image id, Caption) pairs, optionally restricted to one split."""
        return [(it.id, c) for it in self.items if split is None or it.split == split for c in it.captions]

    def images(self, split: str) -> np.ndarray:
        return np.stack([it.pixels for it in self.split(split)]).astype(np.float64)

    def word(self, token: int) -> str:
        return self.vocab[token]

    def token(self, word: str) -> int:
        try:
            return self.vocab_index[word]
        except KeyError:
            raise VocabularyError(f"word {word!r} not in vocabulary") from None


def _sample_scene(rng, flavor: Flavor, params: WorldParams, seed: int) -> SceneSpec:
    n_obj = 1 + int(rng.choice(len(flavor.object_count_probs), p=flavor.object_count_probs))
    n_obj = min(n_obj, params.max_objects)
    cells = rng.choice(params.grid * params.grid, size=n_obj, replace=False)
    objs = []
    for cidx in cells:
        objs.append(SceneObject(
            shape=flavor.shape_rank[rng.choice(len(SHAPES), p=_zipf(len(SHAPES)))],
            color=flavor.color_rank[rng.choice(len(COLORS), p=_zipf(len(COLORS)))],
            motion=flavor.verb_rank[rng.choice(len(VERBS), p=_zipf(len(VERBS)))],
            cell=(int(cidx) // params.grid, int(cidx) % params.grid),
        ))
    texture = int(rng.choice(flavor.textures))
    return SceneSpec(seed=seed, objects=tuple(objs), background=texture)


def _sample_captions(rng, scene: SceneSpec, flavor: Flavor, params: WorldParams, vocab_index):
    caps = []
    for _ in range(params.captions_per_image):
        objs = list(scene.objects)
        order = rng.permutation(len(objs))
        objs = [objs[i] for i in order]
        if len(objs) > 1 and rng.random() < params.subset_caption_rate:
            keep = int(rng.integers(1, len(objs)))
            objs = objs[:keep]
        template = int(rng.choice(3, p=flavor.template_weights))
        caps.append(make_caption(_caption_words(objs, template, params.max_caption_tokens), vocab_index))
    return caps


def generate_corpus(seed: int, n_train: int, n_val: int, n_test: int,
                    world_params: WorldParams | None = None, flavor: str = "alpha") -> Corpus:
    """Build a deterministic three-split corpus of rendered scenes and captions."""
    params = world_params or WorldParams()
    params.validate()
    if min(n_train, n_val, n_test) < 1:
        raise ConfigError("every split needs at least one image")
    if flavor not in FLAVORS:
        raise ConfigError(f"unknown corpus flavor {flavor!r}")
    fl = FLAVORS[flavor]
    vocab, lexicon = build_vocab()
    vocab_index = {w: i for i, w in enumerate(vocab)}
    for w in list(fl.shape_rank) + list(fl.color_rank) + list(fl.verb_rank):
        if lexicon.get(w) not in POS_ORDER:
            raise ConfigError(f"attribute {w!r} missing from the POS lexicon")

    items = []
    size = (params.image_size, params.image_size)
    j = 0
    for split, n in (("train", n_train), ("val", n_val), ("test", n_test)):
        for k in range(n):
            rng = substream(seed, "corpus", flavor, j)
            scene_seed = int(rng.integers(2 ** 31))
            scene = _sample_scene(rng, fl, params, scene_seed)
            caps = _sample_captions(rng, scene, fl, params, vocab_index)
            pixels = render_scene(scene, size, params.grid).astype(np.uint8)
            items.append(CorpusItem(f"{flavor}-{split}-{k:05d}", split, scene, caps, pixels))
            j += 1
    return Corpus(flavor, seed, params, vocab, lexicon, items)


def merge_corpora(*corpora: Corpus) -> Corpus:
    """Concatenate corpora sharing one vocabulary (used to train a shared matcher)."""
    first = corpora[0]
    for c in corpora[1:]:
        if c.vocab != first.vocab or c.params != first.params:
            raise ConfigError("cannot merge corpora with different vocabularies or world params")
    items = [it for c in corpora for it in c.items]
    return Corpus("+".join(c.flavor for c in corpora), first.seed, first.params,
                  first.vocab, first.pos_lexicon, items)


def word_frequencies(corpus: Corpus, split: str | None = None) -> Counter:
    counts = Counter()
    for _, cap in corpus.captions(split):
        counts.update(corpus.vocab[t] for t in cap.tokens)
    return counts


def select_keywords(corpus: Corpus, per_pos: int, seed: int):
    """Pick ``per_pos`` keywords per part of speech, spread over frequency terciles.

    Returns a list of (keyword, pos, frequency) grouped noun, verb, adjective
    and sorted by decreasing frequency inside each group.
    """
    if per_pos < 0:
        raise ConfigError("per_pos must be non-negative")
    if per_pos == 0:
        return []
    freq = word_frequencies(corpus)
    in_test = set(word_frequencies(corpus, "test"))
    rng = substream(seed, "keywords")
    out = []
    for pos in POS_ORDER:
        cands = [w for w in corpus.vocab if corpus.pos_lexicon.get(w) == pos and w in in_test]
        if len(cands) < per_pos:
            raise ConfigError(f"only {len(cands)} {pos}s occur in the test split, need {per_pos}")
        cands.sort(key=lambda w: (-freq[w], w))
        if per_pos == 1:
            picked = [cands[int(rng.integers(len(cands)))]]
        else:
            terciles = np.array_split(np.arange(len(cands)), 3)
            top = int(rng.choice(terciles[0]))
            bottom = int(rng.choice(terciles[-1]))
            rest = [i for i in range(len(cands)) if i not in (top, bottom)]
            extra = rng.choice(rest, size=per_pos - 2, replace=False) if per_pos > 2 else []
            picked = [cands[i] for i in sorted({top, bottom, *map(int, extra)})]
        picked.sort(key=lambda w: (-freq[w], w))
        out.extend((w, pos, freq[w]) for w in picked)
    return out


# ---------------------------------------------------------------- benign set


@dataclass
class BenignSet:
    images: list
    seed: int = 0

    def __len__(self):
        return len(self.images)

    @property
    def ids(self):
        return [f"benign-{i:02d}" for i in range(len(self.images))]

    def stack(self) -> np.ndarray:
        return np.stack(self.images)


def _benign_image(rng, size: int) -> np.ndarray:
    h = w = size
    base = rng.uniform(20, 60)
    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w] / (size - 1)
    ramp = np.cos(theta) * xx + np.sin(theta) * yy
    img = base + 7.0 * (ramp - ramp.mean())[..., None] * np.ones(3)
    # a block of fine print: 1-px glyph strokes on a 4-px line pitch
    ink = rng.uniform(10, 17) * (-1.0 if rng.random() < 0.7 else 1.0)
    rows = int(rng.uniform(0.3, 0.6) * h)
    first = int(rng.integers(0, h - rows + 1)) // 4 * 4
    for top in range(first, min(h, first + rows), 4):
        x = int(rng.integers(0, 3))
        while x < w:
            word = int(rng.integers(2, 7))
            for k in range(word):
                if x + 2 * k < w and rng.random() < 0.8:
                    img[top + 1:top + 3, x + 2 * k] += ink
            x += 2 * word + 2
    return quantize(img).astype(np.float64)


def generate_benign_set(seed: int, n_h: int = 20, size: int = 64) -> BenignSet:
    """Advertisement-like carriers: dark grey ramps carrying a block of fine print."""
    if n_h < 1:
        raise ConfigError("n_h must be >= 1")
    images = [_benign_image(substream(seed, "benign", i), size) for i in range(n_h)]
    return BenignSet(images, seed)


# ---------------------------------------------------------------- persistence


def save_corpus(corpus: Corpus, directory) -> Path:
    """Write images as PPM plus one JSON manifest; returns the manifest path."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for it in corpus.items:
        write_ppm(directory / "images" / f"{it.id}.ppm", it.pixels)
        entries.append({
            "id": it.id,
            "split": it.split,
            "scene": it.scene.to_json(),
            "captions": [c.text for c in it.captions],
            "tokens": [list(c.tokens) for c in it.captions],
        })
    manifest = {
        "flavor": corpus.flavor,
        "seed": corpus.seed,
        "params": corpus.params.__dict__,
        "vocab": corpus.vocab,
        "lexicon": corpus.pos_lexicon,
        "items": entries,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_corpus(directory) -> Corpus:
    directory = Path(directory)
    try:
        m = json.loads((directory / "manifest.json").read_text())
        items = []
        for e in m["items"]:
            caps = [Caption(tuple(t), s) for t, s in zip(e["tokens"], e["captions"])]
            pixels = read_ppm(directory / "images" / f"{e['id']}.ppm").astype(np.uint8)
            items.append(CorpusItem(e["id"], e["split"], SceneSpec.from_json(e["scene"]), caps, pixels))
        return Corpus(m["flavor"], m["seed"], WorldParams(**m["params"]), m["vocab"], m["lexicon"], items)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{directory}: malformed corpus manifest ({exc})") from exc


def save_benign_set(benign: BenignSet, directory) -> None:
    directory = Path(directory)
    for bid, img in zip(benign.ids, benign.images):
        write_ppm(directory / f"{bid}.ppm", img)


def load_benign_set(directory) -> BenignSet:
    paths = sorted(Path(directory).glob("benign-*.ppm"))
    if not paths:
        raise FormatError(f"no benign images under {directory}")
    return BenignSet([read_ppm(p) for p in paths])
