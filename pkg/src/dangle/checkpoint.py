"""Checkpoint files: a flat map from dot-separated parameter names to
row-major arrays, stored as an uncompressed ``.npz``. Shapes travel with
the arrays; loading restores into a model with matching names."""

import numpy as np


def save_checkpoint(model, path):
    np.savez(path, **model.state_dict())
    return path


def load_state(path):
    with np.load(path) as data:
        return {name: data[name] for name in data.files}


def load_checkpoint(model, path):
    model.load_state_dict(load_state(path))
    return model
