"""Token/id maps with fixed reserved entries.

Id 0 is padding, 1 the end-of-sequence marker, 2 the reserved query
placeholder token. Token order is sorted, so a vocabulary is a pure
function of the token set.
"""

import numpy as np

PAD_TOKEN = "<pad>"
EOS_TOKEN = "<eos>"
PH_TOKEN = "<ph>"
PAD_ID = 0
EOS_ID = 1
PH_ID = 2
RESERVED = (PAD_TOKEN, EOS_TOKEN, PH_TOKEN)


class Vocab:
    def __init__(self, tokens):
        items = sorted(set(tokens) - set(RESERVED))
        self._tokens = list(RESERVED) + items
        self._ids = {t: i for i, t in enumerate(self._tokens)}

    def __len__(self):
        return len(self._tokens)

    def __contains__(self, token):
        return token in self._ids

    def id(self, token):
        try:
            return self._ids[token]
        except KeyError:
            raise KeyError(f"token {token!r} not in vocabulary") from None

    def token(self, idx):
        return self._tokens[idx]

    def encode(self, tokens):
        return np.array([self.id(t) for t in tokens], dtype=np.int64)

    def decode(self, ids):
        return [self._tokens[int(i)] for i in ids]

    @classmethod
    def from_examples(cls, examples, side="both"):
        tokens = set()
        for ex in examples:
            if side in ("source", "both"):
                tokens.update(ex.source_tokens)
            if side in ("target", "both"):
                tokens.update(ex.target_tokens)
        return cls(tokens)
