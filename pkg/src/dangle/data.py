"""Data machinery for compositional-generalization sequence tasks.

Covers the tab-separated dataset format (source sentence, logical form,
generalization type), a synthetic nested-prepositional-phrase grammar
used as a desk-scale structural-generalization task, recursion-depth
split construction, and exact-match scoring.

Logical forms are emitted pre-tokenized: one space between every token,
with parentheses, commas, dots, and AND as their own tokens, so loading
them back is plain whitespace splitting. Variables are named after the
(unique within an example) noun they denote, e.g. ``x_table``, with
``x_ev`` for the event; deeper nestings therefore reuse the same token
inventory that shallow training examples expose.
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field

import numpy as np

GEN_TYPE_PATTERN = re.compile(r"^synthetic_pp(\d+)$")

DEFAULT_NOUNS = (
    "boy", "girl", "cat", "dog", "cake", "table", "house", "box", "ball",
    "bottle", "tree", "bird", "cup", "book", "flower", "garden", "river",
    "stone", "horse", "lamp",
)
DEFAULT_VERBS = {"saw": "see", "liked": "like", "held": "hold", "found": "find", "noticed": "notice"}
DEFAULT_PREPOSITIONS = ("in", "on", "beside")
DEFAULT_DETERMINERS = ("a",)


@dataclass
class Seq2SeqExample:
    source_tokens: list
    target_tokens: list
    gen_type: str = "in_distribution"
    depth: int = 0

    def __post_init__(self):
        if not self.source_tokens or not self.target_tokens:
            raise ValueError("examples need nonempty source and target token lists")


@dataclass
class MiniGrammar:
    """Transitive clause with recursively nested PP modifiers on the object."""

    nouns: tuple = DEFAULT_NOUNS
    verbs: dict = field(default_factory=lambda: dict(DEFAULT_VERBS))
    prepositions: tuple = DEFAULT_PREPOSITIONS
    determiners: tuple = DEFAULT_DETERMINERS


@dataclass
class DepthSplit:
    train: list
    gen: list
    boundary: int


def depth_from_gen_type(gen_type):
    m = GEN_TYPE_PATTERN.match(gen_type)
    return int(m.group(1)) if m else 0


def load_tsv(path):
    """Read examples from a 3-field tab-separated file, whitespace-tokenized."""
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ValueError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}"
                )
            source, target, gen_type = fields
            examples.append(
                Seq2SeqExample(
                    source_tokens=source.split(),
                    target_tokens=target.split(),
                    gen_type=gen_type,
                    depth=depth_from_gen_type(gen_type),
                )
            )
    return examples


def save_tsv(examples, path):
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(
                " ".join(ex.source_tokens) + "\t" + " ".join(ex.target_tokens) + "\t" + ex.gen_type + "\n"
            )


def _unary(pred, var):
    return [pred, "(", var, ")"]


def _binary(tokens, a, b):
    return tokens + ["(", a, ",", b, ")"]


def logical_form(verb_lemma, nouns, prepositions):
    """COGS-style conjunction for subject, verb frame, and the nested PP chain."""
    subj, obj = nouns[0], nouns[1]
    conjuncts = [
        _unary(subj, f"x_{subj}"),
        _binary([verb_lemma, ".", "agent"], "x_ev", f"x_{subj}"),
        _binary([verb_lemma, ".", "theme"], "x_ev", f"x_{obj}"),
        _unary(obj, f"x_{obj}"),
    ]
    head = obj
    for prep, noun in zip(prepositions, nouns[2:]):
        conjuncts.append(_binary([head, ".", "nmod", ".", prep], f"x_{head}", f"x_{noun}"))
        conjuncts.append(_unary(noun, f"x_{noun}"))
        head = noun
    tokens = []
    for i, c in enumerate(conjuncts):
        if i:
            tokens.append("AND")
        tokens.extend(c)
    return tokens


def generate_nested(grammar: MiniGrammar, depth_distribution, count, seed):
    """Sample ``count`` sentence/logical-form pairs, deterministic under seed.

    ``depth_distribution`` maps depth -> weight. Modifier k attaches to
    noun k, so the nmod chain is strictly nested. Nouns are sampled without
    replacement within an example because they name the variables.
    """
    if count < 1:
        raise ValueError("generate_nested: count must be >= 1")
    depths = sorted(depth_distribution)
    weights = np.array([depth_distribution[d] for d in depths], dtype=float)
    if np.any(weights < 0) or weights.sum() <= 0:
        raise ValueError("generate_nested: depth weights must be nonnegative and sum > 0")
    weights /= weights.sum()
    max_depth = max(depths)
    if max_depth + 2 > len(grammar.nouns):
        raise ValueError(
            f"generate_nested: depth {max_depth} needs {max_depth + 2} distinct nouns "
            f"but the grammar only has {len(grammar.nouns)}; variable naming would overflow"
        )
    rng = np.random.default_rng(seed)
    verbs = sorted(grammar.verbs)
    examples = []
    for _ in range(count):
        depth = int(rng.choice(depths, p=weights))
        verb = verbs[rng.integers(len(verbs))]
        nouns = list(rng.choice(grammar.nouns, size=depth + 2, replace=False))
        preps = [grammar.prepositions[rng.integers(len(grammar.prepositions))] for _ in range(depth)]
        det = grammar.determiners[rng.integers(len(grammar.determiners))]
        source = [det, nouns[0], verb, det, nouns[1]]
        for prep, noun in zip(preps, nouns[2:]):
            source.extend([prep, det, noun])
        target = logical_form(grammar.verbs[verb], nouns, preps)
        examples.append(
            Seq2SeqExample(
                source_tokens=source,
                target_tokens=target,
                gen_type=f"synthetic_pp{depth}",
                depth=depth,
            )
        )
    return examples


def build_depth_split(dataset, boundary):
    """Partition by recursion depth: train <= boundary < gen."""
    train = [ex for ex in dataset if ex.depth <= boundary]
    gen = [ex for ex in dataset if ex.depth > boundary]
    if not gen:
        warnings.warn(f"depth split at {boundary} leaves an empty generalization set")
    return DepthSplit(train=train, gen=gen, boundary=boundary)


def exact_match(predicted_tokens, gold_tokens):
    return list(predicted_tokens) == list(gold_tokens)


def exact_match_accuracy(pairs):
    """Percentage of (predicted, gold) pairs whose token sequences match."""
    pairs = list(pairs)
    if not pairs:
        return 0.0
    hits = sum(exact_match(p, g) for p, g in pairs)
    return 100.0 * hits / len(pairs)
