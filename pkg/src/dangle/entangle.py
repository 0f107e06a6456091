"""Intra-/inter-class variance of prediction-time hidden states.

For every gold target position whose token belongs to a tracked class,
the vector that feeds that position's output logits is recorded (the
placeholder's re-encoded state for the encoder-only model, the last
decoder layer's state otherwise). Intra-class variance averages each
class's per-dimension population variance weighted by class frequency;
inter-class variance is the frequency-weighted population variance of
the class means. Their ratio is the entanglement score: lower means the
representation of a class moves less with its context.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class HiddenStateRecord:
    label: str
    example_id: int
    step: int
    vector: np.ndarray


@dataclass
class EntanglementReport:
    v_intra: float
    v_inter: float
    ratio: float
    class_counts: dict

    def to_json(self):
        return {
            "v_intra": self.v_intra,
            "v_inter": self.v_inter,
            "ratio": self.ratio,
            "class_counts": dict(self.class_counts),
        }


def _grouped(records):
    if not records:
        raise ValueError("no hidden-state records")
    dims = {r.vector.shape for r in records}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise ValueError(f"records must share one vector dimension, got shapes {sorted(dims)}")
    groups = {}
    for r in records:
        groups.setdefault(r.label, []).append(np.asarray(r.vector, dtype=np.float64))
    return {label: np.stack(vecs) for label, vecs in groups.items()}


def intra_class_variance(records):
    """Frequency-weighted mean of per-class population variances, averaged
    over dimensions."""
    groups = _grouped(records)
    if all(len(v) < 2 for v in groups.values()):
        raise ValueError("intra-class variance undefined: every class is a singleton")
    total = sum(len(v) for v in groups.values())
    acc = 0.0
    for vecs in groups.values():
        acc += (len(vecs) / total) * vecs.var(axis=0).mean()
    return float(acc)


def inter_class_variance(records):
    """Frequency-weighted population variance of the class means, averaged
    over dimensions."""
    groups = _grouped(records)
    if len(groups) < 2:
        raise ValueError("inter-class variance undefined: need at least two classes")
    total = sum(len(v) for v in groups.values())
    weights = np.array([len(v) / total for v in groups.values()])
    means = np.stack([v.mean(axis=0) for v in groups.values()])
    grand = (weights[:, None] * means).sum(axis=0)
    acc = (weights[:, None] * (means - grand) ** 2).sum(axis=0).mean()
    return float(acc)


def entanglement_ratio(records):
    v_intra = intra_class_variance(records)
    v_inter = inter_class_variance(records)
    if v_inter == 0.0:
        raise ValueError("inter-class variance is zero: classes are indistinguishable")
    groups = _grouped(records)
    counts = {label: len(v) for label, v in sorted(groups.items())}
    return EntanglementReport(
        v_intra=v_intra, v_inter=v_inter, ratio=v_intra / v_inter, class_counts=counts
    )


def collect_hidden_states(model, examples, src_vocab, tgt_vocab, tracked_classes,
                          batch_pairs=256):
    """Teacher-forced hidden states for every tracked gold target token.

    Models expose ``prediction_vectors``; the re-encoding models are run
    only on the (example, step) pairs that actually predict a tracked
    token, batched for speed.
    """
    tracked = list(tracked_classes)
    if not tracked:
        raise ValueError("tracked_classes must be nonempty")
    tracked_set = set(tracked)
    wanted = []  # (example index, step index, class)
    for idx, ex in enumerate(examples):
        for t, tok in enumerate(ex.target_tokens):
            if tok in tracked_set:
                wanted.append((idx, t, tok))
    present = {cls for _, _, cls in wanted}
    for cls in tracked:
        if cls not in present:
            raise ValueError(f"tracked class {cls!r} never occurs in the dataset targets")

    from .transformer import Seq2SeqTransformer
    from .vocab import EOS_ID

    records = []
    if isinstance(model, Seq2SeqTransformer):
        by_example = {}
        for idx, t, cls in wanted:
            by_example.setdefault(idx, []).append((t, cls))
        items = sorted(by_example.items())
        for lo in range(0, len(items), 16):
            chunk = items[lo : lo + 16]
            encoded = []
            for idx, _ in chunk:
                ex = examples[idx]
                src = src_vocab.encode(ex.source_tokens)
                tgt = np.concatenate([tgt_vocab.encode(ex.target_tokens), [EOS_ID]])
                encoded.append((src, tgt))
            smax = max(len(s) for s, _ in encoded)
            tmax = max(len(t) for _, t in encoded)
            src_ids = np.zeros((len(chunk), smax), dtype=np.int64)
            tgt_ids = np.zeros((len(chunk), tmax), dtype=np.int64)
            lens = []
            for i, (src, tgt) in enumerate(encoded):
                src_ids[i, : len(src)] = src
                tgt_ids[i, : len(tgt)] = tgt
                lens.append(len(tgt))
            vectors = model.prediction_vectors(src_ids, tgt_ids, lens)
            for i, (idx, hits) in enumerate(chunk):
                for t, cls in hits:
                    records.append(
                        HiddenStateRecord(cls, idx, t + 1, vectors[i, t].astype(np.float64))
                    )
    else:
        pairs, meta = [], []
        for idx, t, cls in wanted:
            ex = examples[idx]
            src = src_vocab.encode(ex.source_tokens)
            prefix = tgt_vocab.encode(ex.target_tokens[:t])
            pairs.append((src, prefix))
            meta.append((idx, t, cls))
        for lo in range(0, len(pairs), batch_pairs):
            _, rows = model.pair_logits(pairs[lo : lo + batch_pairs])
            for row, (idx, t, cls) in zip(rows.data, meta[lo : lo + batch_pairs]):
                records.append(HiddenStateRecord(cls, idx, t + 1, row.astype(np.float64)))
    return records


def dump_for_projection(records, path):
    """TSV with header ``class example_id step v_1..v_d``, one record per row."""
    if not records:
        raise ValueError("dump_for_projection: no records")
    d = len(records[0].vector)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(["class", "example_id", "step"] + [f"v_{i + 1}" for i in range(d)]) + "\n")
        for r in records:
            values = "\t".join(repr(float(v)) for v in r.vector)
            fh.write(f"{r.label}\t{r.example_id}\t{r.step}\t{values}\n")


def load_projection(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header[:3] != ["class", "example_id", "step"]:
            raise ValueError(f"{path}: not a projection dump (header {header[:3]})")
        for line in fh:
            fields = line.rstrip("\n").split("\t")
            records.append(
                HiddenStateRecord(
                    label=fields[0],
                    example_id=int(fields[1]),
                    step=int(fields[2]),
                    vector=np.array([float(v) for v in fields[3:]]),
                )
            )
    return records
