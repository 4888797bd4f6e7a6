"""Keyword-targeted adversarial patches ("Trojan-horse" images).

A single square patch is optimised so that every benign carrier image,
once overlaid with it, embeds close to the contextual embedding of a
keyword. The patch starts from a parity-checked binary beacon and is held
near it by a quadratic penalty so the beacon stays decodable.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, FormatError, KeywordError
from .matcher import MatcherModel, embed_images, embed_texts, image_embedding_input_grad
from .numerics import l2_normalize
from .ppm import read_ppm, write_ppm
from .synthworld import BenignSet, Corpus, substream

PLACEMENTS = ("top-right", "top-left", "bottom-right", "bottom-left")
DEFAULT_PAYLOAD = "54726f6a616e"  # ASCII "Trojan", 48 bits


# ---------------------------------------------------------------- masks


@dataclass(frozen=True)
class MaskSpec:
    image_size: tuple
    patch_ratio: float = 0.1
    placement: object = "top-right"  # one of PLACEMENTS or an explicit (row, col) offset

    def __post_init__(self):
        if not 0.0 < self.patch_ratio <= 1.0:
            raise ConfigError(f"patch_ratio must be in (0, 1], got {self.patch_ratio}")
        if self.side < 4:
            raise ConfigError(f"patch side {self.side} < 4 for ratio {self.patch_ratio}")
        r, c = self.offset
        h, w = self.image_size[:2]
        if r < 0 or c < 0 or r + self.side > h or c + self.side > w:
            raise ConfigError(f"patch at {self.offset} with side {self.side} leaves the image")

    @property
    def side(self) -> int:
        h, w = self.image_size[:2]
        return int(math.floor(math.sqrt(self.patch_ratio) * min(h, w) + 0.5))

    @property
    def offset(self):
        h, w = self.image_size[:2]
        s = self.side
        if isinstance(self.placement, str):
            if self.placement not in PLACEMENTS:
                raise ConfigError(f"unknown placement {self.placement!r}")
            row = 0 if self.placement.startswith("top") else h - s
            col = w - s if self.placement.endswith("right") else 0
            return row, col
        row, col = self.placement
        return int(row), int(col)

    @property
    def window(self):
        r, c = self.offset
        return slice(r, r + self.side), slice(c, c + self.side)

    def mask(self, channels: int = 3) -> np.ndarray:
        """Binary HxWxC mask with ones where the patch replaces the image."""
        h, w = self.image_size[:2]
        m = np.zeros((h, w, channels))
        m[self.window] = 1.0
        return m


def apply_patch(benign: np.ndarray, delta: np.ndarray, mask: MaskSpec) -> np.ndarray:
    """Overlay ``delta`` on one image or a batch (..., H, W, C) at the mask window."""
    benign = np.asarray(benign, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    h, w = mask.image_size[:2]
    if benign.shape[-3:-1] != (h, w):
        raise DimensionError(f"image {benign.shape[-3:-1]} does not match mask {(h, w)}")
    if delta.shape != (mask.side, mask.side, benign.shape[-1]):
        raise DimensionError(f"patch {delta.shape} does not match side {mask.side}")
    out = benign.copy()
    rs, cs = mask.window
    out[..., rs, cs, :] = delta
    return out


# ---------------------------------------------------------------- beacon code


@dataclass(frozen=True)
class BeaconCode:
    grid: np.ndarray  # K x K of {0, 1}
    payload_bits: tuple
    parity_bits: tuple
    rendered: np.ndarray  # side x side x 3, values 0 / 255


def beacon_layout(k: int = 8):
    """Cell roles for a KxK beacon: 'payload', 'parity' or 'orient'.

    Last column holds one even-parity bit per row. The two outermost cells at
    both ends of the first and last row (excluding the parity column) are
    fixed orientation cells.
    """
    if k < 5:
        raise ConfigError("beacon grid must be at least 5x5")
    roles = np.full((k, k), "payload", dtype=object)
    roles[:, k - 1] = "parity"
    for r in (0, k - 1):
        for c in (0, 1, k - 3, k - 2):
            roles[r, c] = "orient"
    return roles


def _orientation_bits(k: int):
    # fixed asymmetric pattern so top/bottom and left/right are distinguishable
    return {(0, 0): 1, (0, 1): 1, (0, k - 3): 1, (0, k - 2): 0,
            (k - 1, 0): 1, (k - 1, 1): 0, (k - 1, k - 3): 0, (k - 1, k - 2): 0}


def beacon_capacity(k: int = 8) -> int:
    return int((beacon_layout(k) == "payload").sum())


def hex_to_bits(payload_hex: str, n_bits: int | None = None):
    try:
        value = int(payload_hex, 16)
    except ValueError:
        raise ConfigError(f"payload {payload_hex!r} is not hexadecimal") from None
    bits = [int(b) for b in bin(value)[2:].zfill(4 * len(payload_hex))]
    if n_bits is not None:
        if len(bits) > n_bits:
            raise ConfigError(f"payload has {len(bits)} bits, beacon holds {n_bits}")
        bits = bits + [0] * (n_bits - len(bits))
    return bits


def _cell_edges(side: int, k: int) -> np.ndarray:
    return (np.arange(k + 1) * side) // k


def make_beacon(payload_bits, k: int = 8, patch_side: int = 24) -> BeaconCode:
    """Lay payload bits row-major into a KxK grid with per-row even parity.

    Bit 1 renders white (255), bit 0 black (0). Cells are integer pixel
    blocks; when the side is not a multiple of K, cell widths differ by one.
    """
    roles = beacon_layout(k)
    bits = [int(b) for b in payload_bits]
    if any(b not in (0, 1) for b in bits):
        raise ConfigError("payload bits must be 0 or 1")
    if len(bits) > beacon_capacity(k):
        raise ConfigError(f"{len(bits)} payload bits exceed beacon capacity {beacon_capacity(k)}")
    if patch_side < 2 * k:
        raise ConfigError(f"patch side {patch_side} is below 2K = {2 * k}")
    bits = bits + [0] * (beacon_capacity(k) - len(bits))
    grid = np.zeros((k, k), dtype=np.int64)
    orient = _orientation_bits(k)
    it = iter(bits)
    parity = []
    for r in range(k):
        for c in range(k):
            if roles[r, c] == "payload":
                grid[r, c] = next(it)
            elif roles[r, c] == "orient":
                grid[r, c] = orient[(r, c)]
        p = int(grid[r, :k - 1].sum() % 2)
        grid[r, k - 1] = p
        parity.append(p)
    return BeaconCode(grid, tuple(bits), tuple(parity), render_grid(grid, patch_side))


def render_grid(grid: np.ndarray, side: int) -> np.ndarray:
    k = grid.shape[0]
    edges = _cell_edges(side, k)
    img = np.zeros((side, side, 3))
    for r in range(k):
        for c in range(k):
            img[edges[r]:edges[r + 1], edges[c]:edges[c + 1]] = 255.0 * grid[r, c]
    return img


def read_grid(image_patch: np.ndarray, k: int = 8):
    """Per-cell mean intensity thresholded at 127.5; returns (grid, cell means)."""
    patch = np.asarray(image_patch, dtype=np.float64)
    side = patch.shape[0]
    if patch.ndim != 3 or patch.shape[1] != side or side < k:
        raise DimensionError(f"beacon patch must be square with side >= K, got {patch.shape}")
    edges = _cell_edges(side, k)
    means = np.empty((k, k))
    for r in range(k):
        for c in range(k):
            means[r, c] = patch[edges[r]:edges[r + 1], edges[c]:edges[c + 1]].mean()
    return (means > 127.5).astype(np.int64), means


def decode_beacon(image_patch: np.ndarray, k: int = 8, reference: BeaconCode | None = None):
    """Return ``(payload bits, cell_accuracy, scannable)``.

    Scannable means every row passes its parity check and, when a reference
    code is given, the decoded payload equals the reference payload.
    cell_accuracy is the fraction of grid cells equal to the reference grid
    (1.0 when no reference is given and parity holds everywhere).
    """
    grid, _ = read_grid(image_patch, k)
    roles = beacon_layout(k)
    bits = [int(grid[r, c]) for r in range(k) for c in range(k) if roles[r, c] == "payload"]
    parity_ok = all(grid[r].sum() % 2 == 0 for r in range(k))
    if reference is None:
        return bits, 1.0 if parity_ok else float("nan"), parity_ok
    accuracy = float((grid == reference.grid).mean())
    scannable = parity_ok and tuple(bits) == tuple(reference.payload_bits)
    return bits, accuracy, scannable


def anchor_patch(side: int, payload_hex: str = DEFAULT_PAYLOAD, k: int = 8):
    """The beacon used as initial patch, at any side >= K.

    Sides below 2K render the same grid with cells one or two pixels wide,
    on the cell edges ``read_grid`` uses. Returns ``(delta_o, reference BeaconCode)``.
    """
    bits = hex_to_bits(payload_hex, beacon_capacity(k))
    code = make_beacon(bits, k, max(side, 2 * k))
    if side >= 2 * k:
        return code.rendered.copy(), code
    if side < k:
        raise ConfigError(f"patch side {side} cannot hold a {k}x{k} beacon")
    return render_grid(code.grid, side), code


# ---------------------------------------------------------------- keyword context


@dataclass
class KeywordContext:
    keyword: str
    token: int
    sentences: list
    e_w: np.ndarray
    mcs: float


def build_keyword_context(model: MatcherModel, corpus: Corpus, keyword: str, m: int = 500,
                          seed: int = 0, split: str = "train") -> KeywordContext:
    """Contextual keyword embedding: normalised mean of up to ``m`` caption embeddings.

    Also reports the mean cosine similarity (MCS) of the sampled caption
    embeddings to that centre.
    """
    token = corpus.token(keyword)
    pool = [c for _, c in corpus.captions(split) if token in c.tokens]
    if not pool:
        raise KeywordError(f"keyword {keyword!r} does not occur in the {split} split")
    if m < 1:
        raise ConfigError("m must be >= 1")
    rng = substream(seed, "sampling", keyword)
    if len(pool) > m:
        pick = np.sort(rng.choice(len(pool), size=m, replace=False))
        pool = [pool[i] for i in pick]
    emb = embed_texts(model, pool)
    e_w = l2_normalize(emb.mean(axis=0))
    mcs = float(np.mean(emb @ e_w))
    return KeywordContext(keyword, token, pool, e_w, mcs)


# ---------------------------------------------------------------- losses


def attack_loss(model: MatcherModel, images, e_w: np.ndarray) -> float:
    """Mean over images of 1 - cos(e_w, e(x))."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    if images.shape[0] == 0:
        raise ConfigError("attack loss needs at least one image")
    return float(np.mean(1.0 - embed_images(model, images) @ e_w))


@dataclass
class PatchState:
    delta: np.ndarray
    delta_o: np.ndarray
    mask: MaskSpec
    lam: float = 0.3
    eta: float = 0.01
    max_iters: int = 300
    iter: int = 0
    loss_trace: list = field(default_factory=list)  # (attack_term, usability_term)

    def __post_init__(self):
        if self.delta.shape != self.delta_o.shape:
            raise DimensionError("patch and anchor shapes differ")
        if self.lam < 0 or self.eta <= 0:
            raise ConfigError("lambda must be >= 0 and eta > 0")

    @classmethod
    def start(cls, delta_o: np.ndarray, mask: MaskSpec, lam=0.3, eta=0.01, max_iters=300):
        return cls(np.array(delta_o, dtype=np.float64), np.array(delta_o, dtype=np.float64),
                   mask, float(lam), float(eta), int(max_iters))


def usability_term(delta: np.ndarray, delta_o: np.ndarray) -> float:
    """Squared distance to the anchor, normalised by pixel count and 255^2.

    Squared differences are summed over channels; the pixel count is the
    number of spatial positions in the patch.
    """
    diff = np.asarray(delta, dtype=np.float64) - delta_o
    return float(np.sum(diff * diff) / (_pixel_count(diff) * 255.0 ** 2))


def _pixel_count(patch: np.ndarray) -> int:
    return int(patch.shape[0] * patch.shape[1])


def combined_loss(model: MatcherModel, benign, patch: PatchState, e_w: np.ndarray):
    """Return ``(total, attack_term, usability_term)``."""
    images = benign.stack() if isinstance(benign, BenignSet) else np.asarray(benign, dtype=np.float64)
    att = attack_loss(model, apply_patch(images, patch.delta, patch.mask), e_w)
    use = usability_term(patch.delta, patch.delta_o)
    return att + patch.lam * use, att, use


def patch_gradient(model: MatcherModel, benign, patch: PatchState, e_w: np.ndarray) -> np.ndarray:
    """Exact gradient of the combined loss with respect to the patch pixels."""
    images = benign.stack() if isinstance(benign, BenignSet) else np.asarray(benign, dtype=np.float64)
    n = images.shape[0]
    patched = apply_patch(images, patch.delta, patch.mask)
    upstream = np.broadcast_to(-e_w / n, (n, e_w.shape[0]))
    pixel_grad = image_embedding_input_grad(model, patched, upstream)
    rs, cs = patch.mask.window
    g = np.zeros(patch.delta.shape)
    for i in range(n):  # fixed order over carriers
        g += pixel_grad[i, rs, cs, :]
    diff = patch.delta - patch.delta_o
    return g + patch.lam * 2.0 * diff / (_pixel_count(diff) * 255.0 ** 2)


def update_patch(patch: PatchState, grad: np.ndarray, losses=None) -> PatchState:
    """Descent step ``delta <- clip(delta - eta * grad, 0, 255)``, in place."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != patch.delta.shape:
        raise DimensionError(f"gradient {grad.shape} does not match patch {patch.delta.shape}")
    patch.delta = np.clip(patch.delta - patch.eta * grad, 0.0, 255.0)
    patch.iter += 1
    if losses is not None:
        patch.loss_trace.append(tuple(float(v) for v in losses))
    return patch


def step_direction(grad: np.ndarray) -> np.ndarray:
    """Rescale a raw gradient so its largest entry spans the full pixel range.

    With this scaling ``eta`` reads as the largest per-step pixel change as a
    fraction of 255.
    """
    peak = float(np.max(np.abs(grad)))
    if peak == 0.0:
        return np.zeros_like(grad)
    return grad * (255.0 / peak)


# ---------------------------------------------------------------- Algorithm


@dataclass(frozen=True)
class AttackConfig:
    lam: float = 0.3
    eta: float = 0.01
    iters: int = 300
    ratio: float = 0.1
    m: int = 500
    seed: int = 0
    placement: object = "top-right"
    payload_hex: str = DEFAULT_PAYLOAD
    beacon_k: int = 8
    restart: bool = True
    window: int = 50
    rel_tol: float = 1e-4
    attack_goal: float = 0.5


@dataclass
class TrojanSet:
    keyword: str
    images: np.ndarray  # n_h x H x W x C
    source_benign_ids: list
    patch: PatchState
    context: KeywordContext
    converged: bool
    restarts: int
    reference: BeaconCode | None = None

    def scannable(self):
        _, acc, ok = decode_beacon(self.patch.delta, self.reference.grid.shape[0], self.reference)
        return acc, ok


def _run(model, images, patch: PatchState, e_w, iters: int):
    best = (math.inf, patch.delta.copy())
    bests = []
    for _ in range(iters):
        total, att, use = combined_loss(model, images, patch, e_w)
        if total < best[0]:
            best = (total, patch.delta.copy())
        bests.append(best[0])
        grad = patch_gradient(model, images, patch, e_w)
        update_patch(patch, step_direction(grad), (att, use))
    total, att, use = combined_loss(model, images, patch, e_w)
    if total < best[0]:
        best = (total, patch.delta.copy())
    bests.append(best[0])
    return best, bests, att


def _converged(bests, final_attack, cfg: AttackConfig) -> bool:
    if final_attack >= cfg.attack_goal or len(bests) <= cfg.window:
        return False
    old, new = bests[-1 - cfg.window], bests[-1]
    return (old - new) < cfg.rel_tol * max(abs(old), 1e-12)


def generate_trojan_set(model: MatcherModel, corpus: Corpus, benign: BenignSet, keyword: str,
                        config: AttackConfig | None = None, context: KeywordContext | None = None) -> TrojanSet:
    """Optimise one patch for ``keyword`` and return the patched carriers.

    Runs ``iters`` descent steps from the beacon. When the run has not
    converged the patch restarts from the beacon with half the step size and
    twice the iterations, once. If that also fails to converge the best
    patch seen is returned with ``converged=False``. The final patch is
    rounded to integer pixel values.
    """
    cfg = config or AttackConfig()
    ctx = context or build_keyword_context(model, corpus, keyword, cfg.m, cfg.seed)
    images = benign.stack()
    mask = MaskSpec(images.shape[1:3], cfg.ratio, cfg.placement)
    delta_o, reference = anchor_patch(mask.side, cfg.payload_hex, cfg.beacon_k)
    patch = PatchState.start(delta_o, mask, cfg.lam, cfg.eta, cfg.iters)

    restarts = 0
    converged = True
    if cfg.iters > 0:
        best, bests, final_att = _run(model, images, patch, ctx.e_w, cfg.iters)
        converged = _converged(bests, final_att, cfg)
        if not converged and cfg.restart:
            restarts = 1
            trace = patch.loss_trace
            patch = PatchState.start(delta_o, mask, cfg.lam, cfg.eta / 2.0, cfg.iters * 2)
            patch.loss_trace = trace
            patch.iter = len(trace)
            best2, bests2, final_att = _run(model, images, patch, ctx.e_w, cfg.iters * 2)
            converged = _converged(bests2, final_att, cfg)
            if best2[0] < best[0]:
                best = best2
        if not converged:
            patch.delta = best[1]
    # trojans are published as 8-bit images, so the final patch is too
    patch.delta = np.floor(patch.delta + 0.5)
    trojans = apply_patch(images, patch.delta, mask)
    return TrojanSet(keyword, trojans, benign.ids, patch, ctx, converged, restarts, reference)


# ---------------------------------------------------------------- persistence


def save_trojan_set(ts: TrojanSet, directory, config: AttackConfig) -> Path:
    """Trojan PPMs, the patch as PPM and a JSON record; returns the JSON path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(ts.images):
        write_ppm(directory / f"trojan-{i:02d}.ppm", img)
    write_ppm(directory / "patch.ppm", ts.patch.delta)
    acc, ok = ts.scannable()
    att, use = ts.patch.loss_trace[-1] if ts.patch.loss_trace else (float("nan"), 0.0)
    record = {
        "keyword": ts.keyword,
        "config": asdict(config),
        "source_benign_ids": list(ts.source_benign_ids),
        "iterations": ts.patch.iter,
        "eta_final": ts.patch.eta,
        "converged": ts.converged,
        "restarts": ts.restarts,
        "cell_accuracy": acc,
        "scannable": bool(ok),
        "final_attack_loss": att,
        "final_usability": use,
        "mcs": ts.context.mcs,
        "e_w": [float(v) for v in ts.context.e_w],
        "loss_trace": [list(t) for t in ts.patch.loss_trace],
    }
    path = directory / "patch.json"
    path.write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")
    return path


def load_trojan_set(directory, corpus: Corpus | None = None) -> TrojanSet:
    """Rebuild a TrojanSet from ``save_trojan_set`` output.

    The keyword context keeps e_w and MCS only; its sentence list is empty.
    """
    directory = Path(directory)
    try:
        rec = json.loads((directory / "patch.json").read_text())
        cfg = AttackConfig(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in rec["config"].items()})
        n = len(rec["source_benign_ids"])
        images = np.stack([read_ppm(directory / f"trojan-{i:02d}.ppm") for i in range(n)])
        delta = read_ppm(directory / "patch.ppm")
    except (OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{directory}: unreadable trojan set ({exc})") from exc
    mask = MaskSpec(images.shape[1:3], cfg.ratio, cfg.placement)
    delta_o, reference = anchor_patch(mask.side, cfg.payload_hex, cfg.beacon_k)
    patch = PatchState(delta, delta_o, mask, cfg.lam, float(rec["eta_final"]), cfg.iters,
                       int(rec["iterations"]), [tuple(t) for t in rec["loss_trace"]])
    token = corpus.token(rec["keyword"]) if corpus is not None else -1
    ctx = KeywordContext(rec["keyword"], token, [], np.asarray(rec["e_w"], dtype=np.float64), float(rec["mcs"]))
    return TrojanSet(rec["keyword"], images, list(rec["source_benign_ids"]), patch, ctx,
                     bool(rec["converged"]), int(rec["restarts"]), reference)
