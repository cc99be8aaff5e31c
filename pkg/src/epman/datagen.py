"""Procedural episodes: needle recall, fact QA with hard negatives, CFI/KPR perturbations.

Everything is drawn from closed word lists, so the full vocabulary is known in
advance (:func:`vocabulary`) and every answer is present verbatim in the
relevant chunk by construction.
"""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tokenizer import Tokenizer, words

FILLER_WORDS = """
across after again along among ancient autumn away basket beneath between beyond blanket bridge bright
broad calm candle careful castle cellar chapter clever cloud coast copper corner cottage crowd curtain
distant doorway dusty early eastern echo empty evening faded feather field fierce forest gentle golden
gravel harbor hollow honest island ivory journey kettle lantern later lazy ledger letter linen little
market meadow mirror modest morning narrow northern ocean orchard paper pebble pencil quiet rapid
ribbon river rocky rustic saddle scarlet shadow shelf silent silver simple slowly smooth soft southern
spring steady stone stormy stream summer tall thin timber tower travel valley velvet village wander
warm western whisper wide willow window winter wooden yellow young
""".split()

FILLER_GLUE = ["a", "the", "and", "with", "over", "under", "near", "by", "from", "at"]

NEEDLE_PREFIX = "the best thing to do in san francisco is"
NEEDLE_COMPLETION = "eat a sandwich and sit in dolores park on a sunny day"

ACTIVITY_VERBS = ["eat", "ride", "paint", "read", "watch", "climb", "visit", "sketch", "cook", "play"]
ACTIVITY_OBJECTS = ["sandwich", "bicycle", "mural", "poem", "sunset", "hill", "museum", "cable", "noodles", "chess"]
ACTIVITY_PLACES = ["dolores", "presidio", "marina", "chinatown", "haight", "embarcadero", "sunset", "mission"]

FIRST_NAMES = """
alden bryn cassia dorian elin farrow gideon hester ines jasper kerran liora maddox nerys orrin
pella quill rowan sabela tamsin ulric vesna wystan xanthe yorick zelda
""".split()
LAST_NAMES = """
ashcombe blackwood carrow dunmore everly fairholt greaves holloway ingram jessup kestrel lowell
merriman norcott oakhurst penrose quenby ravensworth stirling thackery underhill vance whitlock yardley
""".split()

# relation -> (content word used in statements/questions, object pool)
RELATIONS: dict[str, tuple[str, list[str]]] = {
    "birthplace": ("birthplace", "arvale brennick coldharbor dunmere elsworth fenwick glenrock halden istria jorvik".split()),
    "employer": ("employer", "acmetex boltworks corvin dynacore equinox fluxion gryphon helix ionic jetstream".split()),
    "color": ("color", "amber beige cerulean crimson emerald fuchsia indigo magenta ochre teal".split()),
    "pet": ("pet", "alpaca beagle cockatoo ferret gecko hamster iguana macaw parrot tortoise".split()),
    "instrument": ("instrument", "banjo bassoon cello clarinet dulcimer harp lute oboe sitar viola".split()),
    "sport": ("sport", "archery badminton cricket fencing hurling lacrosse polo rowing sailing squash".split()),
}

SPLIT_LEADS = ["everyone in town knew", "the records mention", "an old letter describes", "people often spoke of"]

_PUNCT = [".", "?", ",", "'"]
_TEMPLATE_WORDS = "what is the of who their was in known".split()


def vocabulary() -> list[str]:
    """Every word any generator can emit, sorted."""
    pool: set[str] = set(FILLER_WORDS) | set(FILLER_GLUE) | set(_TEMPLATE_WORDS) | set(_PUNCT)
    pool |= set(words(NEEDLE_PREFIX)) | set(words(NEEDLE_COMPLETION))
    pool |= set(ACTIVITY_VERBS) | set(ACTIVITY_OBJECTS) | set(ACTIVITY_PLACES) | {"a", "in", "park"}
    pool |= set(FIRST_NAMES) | set(LAST_NAMES)
    for word, objects in RELATIONS.values():
        pool.add(word)
        pool |= set(objects)
    for lead in SPLIT_LEADS:
        pool |= set(words(lead))
    return sorted(pool)


def default_tokenizer() -> Tokenizer:
    return Tokenizer(vocabulary())


# -- data types -------------------------------------------------------------------


@dataclass(frozen=True)
class FactTemplate:
    subject: str
    relation: str
    object: str

    @property
    def relation_word(self) -> str:
        return RELATIONS[self.relation][0]

    def statement(self) -> str:
        return f"the {self.relation_word} of {self.subject} is {self.object} ."

    def question(self) -> str:
        return f"what is the {self.relation_word} of {self.subject} ?"

    def answer(self) -> str:
        return self.object

    def split_statements(self, lead: str) -> tuple[str, str]:
        """Subject introduced in one sentence, the attribute in the next (co-reference)."""
        return f"{lead} {self.subject} .", f"their {self.relation_word} is {self.object} ."


@dataclass
class GeneratedEpisode:
    chunks: list[str]
    query: str
    gold_answer: str
    relevant_index: int
    kind: str = "fact"
    cfi: bool = False
    kpr: bool = False
    hard_negative_count: int = 0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def flags(self) -> dict:
        return {"cfi": self.cfi, "kpr": self.kpr, "kind": self.kind, "hard_negatives": self.hard_negative_count}

    def to_json(self) -> dict:
        return {
            "doc_chunks": list(self.chunks),
            "query": self.query,
            "answer": self.gold_answer,
            "relevant_index": self.relevant_index,
            "flags": self.flags,
            "seed": self.seed,
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GeneratedEpisode":
        flags = obj["flags"]
        return cls(
            chunks=list(obj["doc_chunks"]),
            query=obj["query"],
            gold_answer=obj["answer"],
            relevant_index=int(obj["relevant_index"]),
            kind=flags["kind"],
            cfi=bool(flags["cfi"]),
            kpr=bool(flags["kpr"]),
            hard_negative_count=int(flags["hard_negatives"]),
            seed=int(obj["seed"]),
            meta=dict(obj.get("meta", {})),
        )


def episode_rng(master_seed: int, index: int) -> np.random.Generator:
    """Independent per-episode stream derived from ``(master_seed, index)``."""
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(index,)))


# -- building blocks ----------------------------------------------------------------


def filler_sentence(rng: np.random.Generator, n_words: int | None = None) -> str:
    n = int(rng.integers(5, 9)) if n_words is None else n_words
    out = []
    for i in range(n):
        if i > 0 and rng.random() < 0.25:
            out.append(str(rng.choice(FILLER_GLUE)))
        out.append(str(rng.choice(FILLER_WORDS)))
    return " ".join(out) + " ."


def _n_tokens(text: str) -> int:
    return len(words(text))


def fill_chunk(rng: np.random.Generator, budget: int, core: Sequence[str] = (), min_tokens: int | None = None) -> str:
    """Filler sentences around ``core`` sentences, total at most ``budget`` tokens.

    Core sentences stay in the given order; filler is added before and after
    at random until no further sentence fits.
    """
    core = list(core)
    used = sum(_n_tokens(s) for s in core)
    if used > budget:
        raise ValueError(f"core sentences need {used} tokens, budget is {budget}")
    target = budget if min_tokens is None else int(rng.integers(min_tokens, budget + 1))
    before: list[str] = []
    after: list[str] = []
    for _ in range(64):
        room = target - used
        if room < 6:
            break
        sent = filler_sentence(rng, int(rng.integers(5, min(9, room - 1) + 1)) if room >= 7 else 5)
        n = _n_tokens(sent)
        if n > room:
            break
        (before if (not core or rng.random() < 0.5) else after).append(sent)
        used += n
    text = " ".join(before + core + after)
    if not text:
        text = filler_sentence(rng, 5)
    return text


def random_subject(rng: np.random.Generator) -> str:
    return f"{rng.choice(FIRST_NAMES)} {rng.choice(LAST_NAMES)}"


def random_fact(rng: np.random.Generator, subject: str | None = None, relation: str | None = None) -> FactTemplate:
    relation = relation or str(rng.choice(sorted(RELATIONS)))
    subject = subject or random_subject(rng)
    return FactTemplate(subject, relation, str(rng.choice(RELATIONS[relation][1])))


def template_pool(n_subjects: int = 200, seed: int = 0) -> list[FactTemplate]:
    """A fixed "world": distinct subjects, each with one fact per relation."""
    rng = np.random.default_rng(seed)
    names = [f"{f} {l}" for f in FIRST_NAMES for l in LAST_NAMES]
    if n_subjects > len(names):
        raise ValueError(f"at most {len(names)} distinct subjects are available")
    chosen = rng.choice(len(names), size=n_subjects, replace=False)
    pool = []
    for idx in sorted(chosen):
        for rel in sorted(RELATIONS):
            pool.append(FactTemplate(names[idx], rel, str(rng.choice(RELATIONS[rel][1]))))
    return pool


# -- generators -----------------------------------------------------------------------


def random_completion(rng: np.random.Generator) -> str:
    return f"{rng.choice(ACTIVITY_VERBS)} a {rng.choice(ACTIVITY_OBJECTS)} in {rng.choice(ACTIVITY_PLACES)} park"


def gen_needle_episode(
    rng: np.random.Generator,
    n_chunks: int = 16,
    needle_position: int = 0,
    chunk_len: int = 32,
    completion: str | None = None,
    seed: int = 0,
) -> GeneratedEpisode:
    """Filler chunks with one needle sentence at ``needle_position``.

    ``completion`` defaults to the classic San Francisco answer; pass
    :func:`random_completion` output to force the model to read the context.
    """
    if not 0 <= needle_position < n_chunks:
        raise ValueError(f"needle_position {needle_position} outside 0..{n_chunks - 1}")
    completion = completion or NEEDLE_COMPLETION
    needle = f"{NEEDLE_PREFIX} {completion} ."
    chunks = []
    for i in range(n_chunks):
        if i == needle_position:
            chunks.append(fill_chunk(rng, chunk_len, [needle]))
        else:
            chunks.append(fill_chunk(rng, chunk_len, min_tokens=chunk_len // 2))
    return GeneratedEpisode(
        chunks=chunks,
        query=NEEDLE_PREFIX,
        gold_answer=completion,
        relevant_index=needle_position,
        kind="needle",
        seed=seed,
        meta={"needle": needle},
    )


def _unrelated_fact(rng: np.random.Generator, gold: FactTemplate, pool: Sequence[FactTemplate] | None) -> FactTemplate:
    gold_first, gold_last = gold.subject.split()
    for _ in range(1000):
        cand = pool[int(rng.integers(len(pool)))] if pool else random_fact(rng)
        first, last = cand.subject.split()
        if cand.relation != gold.relation and first != gold_first and last != gold_last:
            return cand
    raise ValueError("template pool too small to draw an unrelated fact")


def _hard_negative(rng: np.random.Generator, gold: FactTemplate, pool: Sequence[FactTemplate] | None) -> FactTemplate:
    """Same subject with another relation, or same relation for another subject."""
    for _ in range(1000):
        if rng.random() < 0.5:
            relation = str(rng.choice([r for r in sorted(RELATIONS) if r != gold.relation]))
            cands = [f for f in pool if f.subject == gold.subject and f.relation == relation] if pool else []
            cand = cands[0] if cands else random_fact(rng, subject=gold.subject, relation=relation)
        else:
            cand = pool[int(rng.integers(len(pool)))] if pool else random_fact(rng, relation=gold.relation)
            if pool and cand.relation != gold.relation:
                continue
        if (cand.subject, cand.relation) == (gold.subject, gold.relation) or cand.object == gold.object:
            continue
        return cand
    raise ValueError("template pool too small to draw a hard negative")


def gen_fact_qa_episode(
    rng: np.random.Generator,
    template_pool: Sequence[FactTemplate] | None = None,
    n_chunks: int = 16,
    n_hard_negatives: int = 0,
    chunk_len: int = 32,
    n_unrelated_facts: int = 3,
    split_evidence: bool = False,
    seed: int = 0,
) -> GeneratedEpisode:
    """One relevant fact chunk among hard negatives, unrelated facts and filler.

    With ``split_evidence`` the subject is introduced in chunk ``j`` and the
    attribute stated (as a co-reference) at the start of chunk ``j + 1``; the
    latter is the relevant chunk.
    """
    if n_hard_negatives + n_unrelated_facts + 1 + int(split_evidence) > n_chunks:
        raise ValueError("too many facts for the number of chunks")
    if template_pool is not None and len(template_pool) < 2:
        raise ValueError("template pool too small")
    gold = template_pool[int(rng.integers(len(template_pool)))] if template_pool else random_fact(rng)
    lo = 1 if split_evidence else 0
    positions = rng.permutation(np.arange(lo, n_chunks))
    rel = int(positions[0])
    taken = {rel, rel - 1} if split_evidence else {rel}
    free = [int(p) for p in rng.permutation(n_chunks) if int(p) not in taken]
    contents: dict[int, list[str]] = {}
    if split_evidence:
        intro, attr = gold.split_statements(str(rng.choice(SPLIT_LEADS)))
        contents[rel - 1] = [intro]
        contents[rel] = [attr]
    else:
        contents[rel] = [gold.statement()]
    hard = []
    for _ in range(n_hard_negatives):
        neg = _hard_negative(rng, gold, template_pool)
        hard.append(neg)
        contents[free.pop()] = [neg.statement()]
    for _ in range(n_unrelated_facts):
        contents[free.pop()] = [_unrelated_fact(rng, gold, template_pool).statement()]
    chunks = []
    for i in range(n_chunks):
        core = contents.get(i, [])
        if split_evidence and i == rel - 1:
            # keep the introduction at the very end so it abuts the next chunk
            chunks.append(" ".join([fill_chunk(rng, chunk_len - _n_tokens(core[0]), min_tokens=6), core[0]]))
        elif split_evidence and i == rel:
            chunks.append(" ".join([core[0], fill_chunk(rng, chunk_len - _n_tokens(core[0]), min_tokens=6)]))
        else:
            chunks.append(fill_chunk(rng, chunk_len, core, min_tokens=chunk_len // 2))
    return GeneratedEpisode(
        chunks=chunks,
        query=gold.question(),
        gold_answer=gold.answer(),
        relevant_index=rel,
        kind="split" if split_evidence else "fact",
        hard_negative_count=n_hard_negatives,
        seed=seed,
        meta={
            "subject": gold.subject,
            "relation": gold.relation,
            "object": gold.object,
            "hard_negatives": [dataclasses.asdict(h) for h in hard],
            **({"intro_index": rel - 1} if split_evidence else {}),
        },
    )


def _replace_word(text: str, old: str, new: str) -> str:
    return re.sub(rf"\b{re.escape(old)}\b", new, text)


def apply_keyword_replacement(episode: GeneratedEpisode, rng: np.random.Generator) -> GeneratedEpisode:
    """Swap the gold answer entity for another of its kind everywhere in the episode."""
    original = episode.gold_answer
    relation = episode.meta.get("relation")
    if relation is None:
        raise ValueError("keyword replacement needs a fact episode")
    present = set(w for c in episode.chunks for w in words(c))
    options = [o for o in RELATIONS[relation][1] if o != original and o not in present]
    if not options:
        options = [o for o in RELATIONS[relation][1] if o != original]
    substitute = str(rng.choice(options))
    return dataclasses.replace(
        episode,
        chunks=[_replace_word(c, original, substitute) for c in episode.chunks],
        gold_answer=substitute,
        kpr=True,
        meta={**episode.meta, "object": substitute, "kpr_original": original},
    )


def perturb_subject(subject: str, rng: np.random.Generator) -> str:
    first, last = subject.split()
    if rng.random() < 0.5:
        return f"{first} {rng.choice([n for n in LAST_NAMES if n != last])}"
    return f"{rng.choice([n for n in FIRST_NAMES if n != first])} {last}"


def apply_confusing_fact(episode: GeneratedEpisode, rng: np.random.Generator) -> GeneratedEpisode:
    """Insert a near-duplicate fact (same relation, perturbed subject, other object)."""
    subject, relation, obj = (episode.meta.get(k) for k in ("subject", "relation", "object"))
    if subject is None:
        raise ValueError("confusing-fact insertion needs a fact episode")
    confusing = FactTemplate(
        perturb_subject(subject, rng),
        relation,
        str(rng.choice([o for o in RELATIONS[relation][1] if o != obj])),
    )
    protected = {episode.relevant_index, episode.meta.get("intro_index", -1)}
    candidates = [i for i in range(len(episode.chunks)) if i not in protected]
    target = int(rng.choice(candidates))
    sentence = confusing.statement()
    chunks = list(episode.chunks)
    # drop trailing filler sentences to keep the chunk length unchanged
    budget = _n_tokens(chunks[target])
    kept = []
    for sent in re.split(r"(?<=[.?!])\s+", chunks[target]):
        if sum(_n_tokens(s) for s in kept) + _n_tokens(sent) + _n_tokens(sentence) <= budget:
            kept.append(sent)
    pos = int(rng.integers(0, len(kept) + 1))
    kept.insert(pos, sentence)
    chunks[target] = " ".join(kept)
    return dataclasses.replace(
        episode,
        chunks=chunks,
        cfi=True,
        meta={**episode.meta, "cfi_index": target, "cfi_subject": confusing.subject, "cfi_object": confusing.object},
    )


def hard_negative_buckets(
    n_per_bucket: Sequence[int],
    seed: int,
    template_pool: Sequence[FactTemplate] | None = None,
    **kwargs,
) -> dict[str, list[GeneratedEpisode]]:
    """Splits ``C0..Cm`` where bucket ``Cm`` holds episodes with ``m`` hard negatives."""
    out: dict[str, list[GeneratedEpisode]] = {}
    counter = 0
    for m, n in enumerate(n_per_bucket):
        eps = []
        for _ in range(n):
            eps.append(gen_fact_qa_episode(episode_rng(seed, counter), template_pool, n_hard_negatives=m, seed=counter, **kwargs))
            counter += 1
        out[f"C{m}"] = eps
    return out


def generate_dataset(
    kind: str,
    n: int,
    seed: int,
    n_chunks: int = 16,
    chunk_len: int = 32,
    hard_negatives: int = 0,
    cfi: bool = False,
    kpr: bool = False,
    vary_completion: bool = False,
    template_pool: Sequence[FactTemplate] | None = None,
    n_unrelated_facts: int = 3,
) -> list[GeneratedEpisode]:
    """``n`` episodes of one kind; episode ``i`` uses stream ``(seed, i)``.

    Needle positions cycle through every depth ``0..n_chunks-1``.
    """
    out = []
    for i in range(n):
        rng = episode_rng(seed, i)
        if kind == "needle":
            completion = random_completion(rng) if vary_completion else None
            ep = gen_needle_episode(rng, n_chunks, i % n_chunks, chunk_len, completion, seed=i)
        elif kind in ("fact", "split"):
            ep = gen_fact_qa_episode(
                rng,
                template_pool,
                n_chunks,
                hard_negatives,
                chunk_len,
                n_unrelated_facts=n_unrelated_facts,
                split_evidence=kind == "split",
                seed=i,
            )
            if cfi:
                ep = apply_confusing_fact(ep, rng)
            if kpr:
                ep = apply_keyword_replacement(ep, rng)
        else:
            raise ValueError(f"unknown dataset kind {kind!r}")
        out.append(ep)
    return out


# -- serialisation ----------------------------------------------------------------------


class DatasetFormatError(ValueError):
    pass


def serialize_dataset(episodes: Iterable[GeneratedEpisode], path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ep in episodes:
            fh.write(json.dumps(ep.to_json(), sort_keys=True, separators=(",", ":")) + "\n")
    return path


def load_dataset(path) -> list[GeneratedEpisode]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(GeneratedEpisode.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetFormatError(f"{path}: line {lineno}: {exc}") from None
    return out
