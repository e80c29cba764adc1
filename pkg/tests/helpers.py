import numpy as np

from elastic_encoder.data import IGNORE_INDEX, PackedRow


def random_row(rng, L, vocab_size, max_segments=3, pad=True, mask_rate=0.3):
    """Packed row with random segment lengths, trailing padding and random MLM labels."""
    n_seg = int(rng.integers(1, max_segments + 1))
    used = L - (int(rng.integers(0, L // 4 + 1)) if pad else 0)
    cuts = sorted(rng.choice(np.arange(1, used), size=min(n_seg - 1, used - 1), replace=False).tolist())
    bounds = cuts + [used]
    ids = rng.integers(0, vocab_size, size=L)
    labels = np.full(L, IGNORE_INDEX)
    sel = np.flatnonzero(rng.random(used) < mask_rate)
    if len(sel) == 0:
        sel = np.array([0])
    labels[sel] = rng.integers(0, vocab_size, size=len(sel))
    return PackedRow(ids=ids, boundaries=bounds, mlm_labels=labels, mask_positions=sel)
