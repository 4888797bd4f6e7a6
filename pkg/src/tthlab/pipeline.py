"""Lazily built experiment state for one run configuration.

A ``Lab`` hands out corpora, the carrier set, trained matchers and trojan
sets, building each on first use and caching it. When given a run
directory it reads artifacts that earlier commands left there instead of
rebuilding them.
"""

from __future__ import annotations

from pathlib import Path

from .attack import AttackConfig, build_keyword_context, generate_trojan_set, load_trojan_set
from .config import RunConfig
from .errors import ConfigError
from .matcher import TrainHyper, load_model, train_matcher
from .synthworld import (
    WorldParams,
    generate_benign_set,
    generate_corpus,
    load_benign_set,
    load_corpus,
    merge_corpora,
    select_keywords,
)


class Lab:
    def __init__(self, config: RunConfig | None = None, run_dir=None, stored_trojans_only: bool = False):
        self.config = config or RunConfig()
        self.run_dir = Path(run_dir) if run_dir is not None else None
        # when set, default-config trojan sets must come from the run directory
        self.stored_trojans_only = stored_trojans_only
        self._corpora = {}
        self._models = {}
        self._benign = {}
        self._trojans = {}

    # ------------------------------------------------------------ world

    def world_params(self) -> WorldParams:
        w = self.config.world
        return WorldParams(w.image_size, w.grid, w.max_objects, w.captions_per_image,
                           w.subset_caption_rate, w.max_caption_tokens)

    def corpus(self, flavor: str | None = None):
        flavor = flavor or self.config.world.flavor
        if flavor not in self._corpora:
            stored = self._stored("corpus", flavor, "manifest.json")
            if stored is not None:
                self._corpora[flavor] = load_corpus(stored.parent)
            else:
                w = self.config.world
                self._corpora[flavor] = generate_corpus(self.config.seed, w.n_train, w.n_val, w.n_test,
                                                        self.world_params(), flavor)
        return self._corpora[flavor]

    def training_corpus(self):
        """Union of both flavors; every matcher is trained on it."""
        w = self.config.world
        return merge_corpora(self.corpus(w.flavor), self.corpus(w.surrogate_flavor))

    def benign(self, seed: int | None = None):
        seed = self.config.seed if seed is None else seed
        if seed not in self._benign:
            stored = self._stored("benign") if seed == self.config.seed else None
            if stored is not None:
                self._benign[seed] = load_benign_set(stored)
            else:
                self._benign[seed] = generate_benign_set(seed, self.config.world.n_benign,
                                                         self.config.world.image_size)
        return self._benign[seed]

    # ------------------------------------------------------------ models

    def hyper(self, arch: str) -> TrainHyper:
        if arch not in self.config.models:
            raise ConfigError(f"no model config for arch {arch!r}")
        m = self.config.models[arch]
        return TrainHyper(m.d, m.d_e, m.pool_factor, m.lr, m.epochs, m.batch, self.config.seed,
                          m.temperature, arch, m.hidden)

    def model(self, arch: str = "A"):
        if arch not in self._models:
            stored = self._stored("models", f"{arch}.bin")
            if stored is not None:
                self._models[arch] = load_model(stored)
            else:
                model, _ = self.train(arch)
                self._models[arch] = model
        return self._models[arch]

    def train(self, arch: str = "A"):
        """Train from scratch (ignoring caches); returns ``(model, TrainLog)``."""
        model, log = train_matcher(self.training_corpus(), self.hyper(arch),
                                   val_corpus=self.corpus(self.config.world.flavor))
        self._models[arch] = model
        return model, log

    # ------------------------------------------------------------ attack

    def keywords(self):
        ev = self.config.eval
        if ev.keywords:
            return list(ev.keywords)
        return [w for w, _, _ in select_keywords(self.corpus(), ev.per_pos, self.config.seed)]

    def attack_config(self, **changes) -> AttackConfig:
        a = self.config.attack
        base = dict(lam=a.lam, eta=a.eta, iters=a.iters, ratio=a.ratio, m=a.m, seed=self.config.seed,
                    placement=a.placement, payload_hex=a.payload_hex, beacon_k=a.beacon_k)
        base.update(changes)
        return AttackConfig(**base)

    def trojan_set(self, arch: str, keyword: str, context_flavor: str | None = None,
                   benign_seed: int | None = None, **changes):
        """Patch built against matcher ``arch`` from ``context_flavor`` training captions."""
        context_flavor = context_flavor or self.config.world.flavor
        cfg = self.attack_config(**changes)
        key = (arch, keyword, context_flavor, benign_seed, cfg)
        if key not in self._trojans and benign_seed is None and cfg == self.attack_config():
            stored = self._stored(*trojan_path(arch, context_flavor, keyword), "patch.json")
            if stored is not None:
                self._trojans[key] = load_trojan_set(stored.parent, self.corpus(context_flavor))
            elif self.stored_trojans_only:
                raise ConfigError(f"no trojan set for keyword {keyword!r} "
                                  f"(arch {arch}, captions {context_flavor}); run the attack command first")
        if key not in self._trojans:
            model = self.model(arch)
            ctx = build_keyword_context(model, self.corpus(context_flavor), keyword, cfg.m, cfg.seed)
            self._trojans[key] = generate_trojan_set(model, self.corpus(context_flavor),
                                                     self.benign(benign_seed), keyword, cfg, ctx)
        return self._trojans[key]

    # ------------------------------------------------------------ helpers

    def trojan_dir(self, arch: str, context_flavor: str, keyword: str) -> Path:
        root = self.run_dir if self.run_dir is not None else self.config.output_root()
        return root.joinpath(*trojan_path(arch, context_flavor, keyword))

    def _stored(self, *parts):
        if self.run_dir is None:
            return None
        path = self.run_dir.joinpath(*parts)
        return path if path.exists() else None


def trojan_path(arch: str, context_flavor: str, keyword: str):
    return ("trojans", arch, context_flavor, keyword)
