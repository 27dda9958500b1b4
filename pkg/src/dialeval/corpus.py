"""Data model, ingestion, vocabulary, preprocessing, splits, and synthetic systems.

The synthetic generators stand in for a fleet of real dialogue systems. Every
token carries a planted latent vector; a system answers each shared post by
mixing three ingredients whose proportions are driven by a per-response
quality draw:

* literal copies of reference tokens (a cue any trained scorer can exploit),
* system-specific paraphrase tokens whose latent vectors sit near some
  reference token (a cue that must be learned from that system's data),
* system-specific distractor tokens with unrelated latent vectors.

The label is the latent response/reference similarity bucketed into thirds
per system, so label marginals are balanced by construction. Because each
system draws its paraphrases and distractors from its own token pool, a
scorer trained on one system generalizes to another only through the literal
copy cue, and the per-system copy rate controls how much that helps.

A shared pool of ambiguous tokens is re-assigned a latent meaning by every
system: the same surface token can paraphrase a reference under one system
and be filler under the next. Adapting to a new system therefore overwrites
embeddings the previous systems relied on, which is what makes sequential
updating genuinely destructive here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

JSONL_FIELDS = ("post", "response", "reference", "label", "system_id", "post_id")


class IngestError(ValueError):
    """Malformed input rows; the message lists offending line numbers."""


class SplitError(ValueError):
    pass


class DegenerateSpecError(ValueError):
    """Generator spec would produce labels with no usable variation."""


@dataclass
class Quad:
    """One annotated example: a post, a machine response, a human reference,
    and a 0/1/2 quality grade."""

    post: list[str]
    response: list[str]
    reference: list[str]
    label: int
    system_id: str
    post_id: str


@dataclass
class SystemCorpus:
    system_id: str
    train: list[Quad]
    valid: list[Quad]
    test: list[Quad]

    def splits(self):
        return {"train": self.train, "valid": self.valid, "test": self.test}


@dataclass
class TokenSeq:
    """Fixed-length id buffer plus the number of real (non-pad) positions."""

    ids: np.ndarray
    true_len: int


class Vocabulary:
    """token -> id map with reserved pad=0 and unknown=1 entries.

    Built from training data only; entries are ordered by descending
    frequency (ties broken alphabetically) so construction is deterministic.
    """

    def __init__(self, tokens: list[str]):
        self._token_to_id = {PAD_TOKEN: PAD_ID, UNK_TOKEN: UNK_ID}
        for tok in tokens:
            if tok in self._token_to_id:
                raise ValueError(f"duplicate or reserved token: {tok!r}")
            self._token_to_id[tok] = len(self._token_to_id)

    @classmethod
    def build(cls, quads: list[Quad], min_count: int = 1, max_size: int | None = None) -> "Vocabulary":
        counts: dict[str, int] = {}
        for q in quads:
            for tok in (*q.post, *q.response, *q.reference):
                counts[tok] = counts.get(tok, 0) + 1
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        kept = [tok for tok, n in ranked if n >= min_count and tok not in (PAD_TOKEN, UNK_TOKEN)]
        if max_size is not None:
            kept = kept[:max_size]
        return cls(kept)

    def __len__(self) -> int:
        return len(self._token_to_id)

    def id_of(self, token: str) -> int:
        return self._token_to_id.get(token, UNK_ID)

    def tokens(self) -> list[str]:
        return [t for t in self._token_to_id if t not in (PAD_TOKEN, UNK_TOKEN)]


def preprocess(tokens: list[str], vocab: Vocabulary, l_max: int = 50) -> TokenSeq:
    """Map tokens to ids, truncate to the first l_max, pad to exactly l_max."""
    ids = [vocab.id_of(t) for t in tokens[:l_max]]
    true_len = len(ids)
    ids.extend([PAD_ID] * (l_max - true_len))
    return TokenSeq(np.asarray(ids, dtype=np.int64), true_len)


# --- JSONL ingestion ---------------------------------------------------------


def load_jsonl(path) -> list[Quad]:
    """Parse one quad per line; collects all malformed lines into one error."""
    quads: list[Quad] = []
    bad: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                bad.append(f"line {lineno}: invalid JSON ({exc.msg})")
                continue
            missing = [f for f in JSONL_FIELDS if f not in row]
            if missing:
                bad.append(f"line {lineno}: missing field(s) {', '.join(missing)}")
                continue
            if row["label"] not in (0, 1, 2):
                bad.append(f"line {lineno}: label {row['label']!r} not in {{0, 1, 2}}")
                continue
            quads.append(
                Quad(
                    post=str(row["post"]).split(),
                    response=str(row["response"]).split(),
                    reference=str(row["reference"]).split(),
                    label=int(row["label"]),
                    system_id=str(row["system_id"]),
                    post_id=str(row["post_id"]),
                )
            )
    if bad:
        raise IngestError(f"{path}: {len(bad)} malformed line(s): " + "; ".join(bad))
    return quads


def save_jsonl(path, quads: list[Quad]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in quads:
            fh.write(
                json.dumps(
                    {
                        "post": " ".join(q.post),
                        "response": " ".join(q.response),
                        "reference": " ".join(q.reference),
                        "label": q.label,
                        "system_id": q.system_id,
                        "post_id": q.post_id,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


# --- splitting ---------------------------------------------------------------


def split_posts(post_ids: list[str], ratios, rng: np.random.Generator) -> dict[str, str]:
    """Assign each distinct post id to one of train/valid/test, seeded."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError(f"ratios must sum to 1, got {ratios}")
    if len(ratios) != 3:
        raise SplitError("expected exactly three ratios (train, valid, test)")
    distinct = sorted(set(post_ids))
    if len(distinct) < len(ratios):
        raise SplitError(f"only {len(distinct)} distinct posts for {len(ratios)} splits")
    order = rng.permutation(len(distinct))
    bounds = np.floor(np.cumsum(ratios) * len(distinct) + 1e-9).astype(int)
    bounds[-1] = len(distinct)
    names = ("train", "valid", "test")
    assignment: dict[str, str] = {}
    start = 0
    for name, stop in zip(names, bounds):
        for k in order[start:stop]:
            assignment[distinct[k]] = name
        start = stop
    return assignment


def split_by_post(quads: list[Quad], ratios, rng: np.random.Generator) -> SystemCorpus:
    """Split one system's quads so all quads sharing a post travel together."""
    assignment = split_posts([q.post_id for q in quads], ratios, rng)
    buckets = {"train": [], "valid": [], "test": []}
    for q in quads:
        buckets[assignment[q.post_id]].append(q)
    system_id = quads[0].system_id if quads else ""
    return SystemCorpus(system_id, buckets["train"], buckets["valid"], buckets["test"])


# --- synthetic world and systems ---------------------------------------------


@dataclass
class WorldConfig:
    n_posts: int = 600
    n_content: int = 80
    n_ambiguous: int = 72
    ambiguous_good_rate: float = 0.6
    latent_dim: int = 16
    post_len: tuple[int, int] = (4, 8)
    ref_keep: float = 0.6
    seed: int = 13


@dataclass
class Post:
    post_id: str
    tokens: list[str]
    reference: list[str]


@dataclass
class World:
    """Shared posts plus the planted latent embedding of every token.

    ambiguous_tokens have no global vector; each system plants its own.
    """

    config: WorldConfig
    posts: list[Post]
    content_tokens: list[str]
    ambiguous_tokens: list[str] = field(default_factory=list)
    token_vecs: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    def vec(self, token: str) -> np.ndarray:
        return self.token_vecs[token]


@dataclass
class SystemSpec:
    """How one synthetic dialogue system answers and how good it tends to be.

    noise is the chance any emitted token is swapped for a random one;
    quality_profile is {"kind": "beta", "a": .., "b": ..} or
    {"kind": "fixed", "value": ..}; copy_rate is the chance a "good" slot
    copies the reference token literally instead of paraphrasing it.
    """

    name: str
    noise: float = 0.1
    quality_profile: dict = field(default_factory=lambda: {"kind": "beta", "a": 2.0, "b": 2.0})
    copy_rate: float = 0.5
    amb_rate: float = 0.8  # chance a non-copied token comes from the shared ambiguous pool
    n_paraphrase: int = 28
    n_distractor: int = 20
    paraphrase_scatter: float = 0.35
    seed: int = 0


def default_system_specs() -> list[SystemSpec]:
    """Five systems on a difficulty gradient: literal echoing first, free
    paraphrasing last, so the copy cue fades along the sequence."""
    return [
        SystemSpec("echo", noise=0.05, copy_rate=0.90, quality_profile={"kind": "beta", "a": 2.2, "b": 1.6}, seed=1),
        SystemSpec("blend", noise=0.08, copy_rate=0.55, quality_profile={"kind": "beta", "a": 2.0, "b": 2.0}, seed=2),
        SystemSpec("drift", noise=0.10, copy_rate=0.35, quality_profile={"kind": "beta", "a": 2.0, "b": 2.0}, seed=3),
        SystemSpec(
            "remix",
            noise=0.12,
            copy_rate=0.25,
            quality_profile={"kind": "beta", "a": 1.6, "b": 2.0},
            n_paraphrase=60,
            n_distractor=45,
            seed=4,
        ),
        SystemSpec(
            "free",
            noise=0.15,
            copy_rate=0.15,
            quality_profile={"kind": "beta", "a": 2.0, "b": 1.6},
            n_paraphrase=120,
            n_distractor=90,
            seed=5,
        ),
    ]


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def synth_world(config: WorldConfig) -> World:
    """Build the shared posts, references, and planted token vectors."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xC0]))
    content = [f"c{k:03d}" for k in range(config.n_content)]
    ambiguous = [f"a{k:03d}" for k in range(config.n_ambiguous)]
    vecs = {tok: _unit(rng.normal(size=config.latent_dim)) for tok in content}
    # Fixed answer map: each content token has a designated "reply" token, so
    # references are a learnable function of their post.
    associate = {content[i]: content[j] for i, j in enumerate(rng.permutation(config.n_content))}
    lo, hi = config.post_len
    posts = []
    for p in range(config.n_posts):
        length = int(rng.integers(lo, hi + 1))
        tokens = [content[k] for k in rng.choice(config.n_content, size=length, replace=False)]
        ref = [associate[t] for t in tokens if rng.random() < config.ref_keep]
        while len(ref) < 3:
            ref.append(content[int(rng.integers(config.n_content))])
        posts.append(Post(f"p{p:04d}", tokens, ref))
    return World(config, posts, content, ambiguous, vecs)


def _validate_spec(spec: SystemSpec) -> None:
    profile = spec.quality_profile
    kind = profile.get("kind")
    if kind == "beta":
        if profile.get("a", 0) <= 0 or profile.get("b", 0) <= 0:
            raise DegenerateSpecError(f"{spec.name}: beta profile needs a, b > 0")
    elif kind == "fixed":
        if not 0.0 <= profile.get("value", -1) <= 1.0:
            raise DegenerateSpecError(f"{spec.name}: fixed quality must lie in [0, 1]")
    else:
        raise DegenerateSpecError(f"{spec.name}: unknown quality profile kind {kind!r}")
    if not 0.0 <= spec.noise < 1.0:
        raise DegenerateSpecError(f"{spec.name}: noise must lie in [0, 1)")
    if not 0.0 <= spec.copy_rate <= 1.0:
        raise DegenerateSpecError(f"{spec.name}: copy_rate must lie in [0, 1]")
    if spec.n_paraphrase < 1 or spec.n_distractor < 1:
        raise DegenerateSpecError(f"{spec.name}: token pools must be non-empty")


def _draw_quality(profile: dict, rng: np.random.Generator) -> float:
    if profile["kind"] == "beta":
        return float(rng.beta(profile["a"], profile["b"]))
    return float(profile["value"])


def synth_system(
    spec: SystemSpec,
    world: World,
    rng: np.random.Generator,
    post_split: dict[str, str] | None = None,
    ratios=(4 / 6, 1 / 6, 1 / 6),
) -> SystemCorpus:
    """Generate this system's response to every shared post, label by latent
    similarity terciles, and split by post.

    Pass the same post_split mapping for every system to get one global
    split, mirroring annotation pipelines where a post never leaks across
    splits regardless of which system answered it.
    """
    _validate_spec(spec)
    pool_rng = np.random.default_rng(np.random.SeedSequence([world.config.seed, 0xA1, spec.seed]))
    dim = world.config.latent_dim

    # System-private token pools. Paraphrase tokens shadow content tokens in
    # latent space; distractors point nowhere in particular.
    shuffled = [world.content_tokens[k] for k in pool_rng.permutation(len(world.content_tokens))]
    para_tokens: dict[str, list[str]] = {}
    vecs = dict(world.token_vecs)
    for j in range(spec.n_paraphrase):
        target = shuffled[j % len(shuffled)]
        tok = f"{spec.name}_k{j:02d}"
        vecs[tok] = _unit(world.vec(target) + spec.paraphrase_scatter * pool_rng.normal(size=dim))
        para_tokens.setdefault(target, []).append(tok)
    dist_tokens = [f"{spec.name}_x{j:02d}" for j in range(spec.n_distractor)]
    for tok in dist_tokens:
        vecs[tok] = _unit(pool_rng.normal(size=dim))

    # This system's reading of the shared ambiguous pool: half the tokens
    # shadow some content token, the rest are filler. Other systems assign
    # the same surface tokens differently.
    amb_good: dict[str, list[str]] = {}
    amb_bad: list[str] = []
    for tok in world.ambiguous_tokens:
        if pool_rng.random() < world.config.ambiguous_good_rate:
            target = shuffled[int(pool_rng.integers(len(shuffled)))]
            vecs[tok] = _unit(world.vec(target) + spec.paraphrase_scatter * pool_rng.normal(size=dim))
            amb_good.setdefault(target, []).append(tok)
        else:
            vecs[tok] = _unit(pool_rng.normal(size=dim))
            amb_bad.append(tok)
    emittable = (
        world.content_tokens
        + sorted(t for ts in para_tokens.values() for t in ts)
        + dist_tokens
        + world.ambiguous_tokens
    )

    responses: list[list[str]] = []
    sims: list[float] = []
    for post in world.posts:
        q = _draw_quality(spec.quality_profile, rng)
        ref = post.reference
        toks: list[str] = []
        for slot, ref_tok in enumerate(ref):
            if rng.random() < q:
                use_amb = rng.random() < spec.amb_rate and amb_good.get(ref_tok)
                non_copy = amb_good.get(ref_tok) if use_amb else para_tokens.get(ref_tok)
                if non_copy and rng.random() >= spec.copy_rate:
                    toks.append(non_copy[int(rng.integers(len(non_copy)))])
                else:
                    toks.append(ref_tok)
            else:
                if rng.random() < spec.amb_rate and amb_bad:
                    toks.append(amb_bad[int(rng.integers(len(amb_bad)))])
                else:
                    toks.append(dist_tokens[int(rng.integers(len(dist_tokens)))])
        toks = [
            emittable[int(rng.integers(len(emittable)))] if rng.random() < spec.noise else t
            for t in toks
        ]
        ref_mat = np.stack([vecs[t] for t in ref])
        sim = float(np.mean([np.max(ref_mat @ vecs[t]) for t in toks]))
        responses.append(toks)
        sims.append(sim)

    # round so exact copies measure identically despite unit-norm rounding
    sims_arr = np.round(np.asarray(sims), 12)
    if float(np.ptp(sims_arr)) == 0.0:
        if np.all(sims_arr >= 0.999):
            labels = [2] * len(sims)
        else:
            raise DegenerateSpecError(f"{spec.name}: zero variance in latent similarity")
    else:
        t1, t2 = np.quantile(sims_arr, [1 / 3, 2 / 3])
        labels = [2 if s >= t2 else 1 if s >= t1 else 0 for s in sims_arr]

    quads = [
        Quad(post.tokens, resp, post.reference, label, spec.name, post.post_id)
        for post, resp, label in zip(world.posts, responses, labels)
    ]
    if post_split is None:
        post_split = split_posts([q.post_id for q in quads], ratios, rng)
    buckets = {"train": [], "valid": [], "test": []}
    for q in quads:
        buckets[post_split[q.post_id]].append(q)
    return SystemCorpus(spec.name, buckets["train"], buckets["valid"], buckets["test"])


def default_corpora(
    seed: int = 13,
    world_config: WorldConfig | None = None,
    specs: list[SystemSpec] | None = None,
) -> dict[str, SystemCorpus]:
    """Generate the default five-system fleet over one shared post split."""
    cfg = world_config if world_config is not None else WorldConfig(seed=seed)
    if world_config is None:
        cfg = replace(cfg, seed=seed)
    world = synth_world(cfg)
    split_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5B]))
    post_split = split_posts([p.post_id for p in world.posts], (4 / 6, 1 / 6, 1 / 6), split_rng)
    out: dict[str, SystemCorpus] = {}
    for spec in specs if specs is not None else default_system_specs():
        sys_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xD7, spec.seed]))
        out[spec.name] = synth_system(spec, world, sys_rng, post_split=post_split)
    return out


def load_generator_config(path) -> tuple[WorldConfig, list[SystemSpec]]:
    """Read a generator description: {"seed", "world": {...}, "systems": [...]}."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    seed = int(raw.get("seed", 13))
    world_kwargs = dict(raw.get("world", {}))
    world_kwargs.setdefault("seed", seed)
    if "post_len" in world_kwargs:
        world_kwargs["post_len"] = tuple(world_kwargs["post_len"])
    world = WorldConfig(**world_kwargs)
    systems = [SystemSpec(**entry) for entry in raw.get("systems", [])]
    if not systems:
        systems = default_system_specs()
    return world, systems
