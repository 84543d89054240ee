"""Seeding discipline.

Every sampling routine in the package takes an integer seed and builds its
generator through :func:`make_rng`, a counter-based Philox stream keyed by a
``SeedSequence`` over the full entropy path.  Derived streams (per task, per
sweep point) come from :func:`derive_seed`, so parallel workers never share
state and results are reproducible from the root seed alone.
"""

import numpy as np


def make_rng(*entropy) -> np.random.Generator:
    """Philox generator keyed by an entropy path of integers."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(*entropy) -> int:
    """Deterministic child seed for the given entropy path."""
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])
