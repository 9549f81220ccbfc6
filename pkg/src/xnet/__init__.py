"""Unpaired image translation with latent cross-consistency training.

Kept import-light on purpose: the CLI configures BLAS thread limits from
XNET_THREADS before numpy loads, so submodules (xnet.tensor, xnet.networks,
...) are imported explicitly by consumers rather than re-exported here.
"""

__version__ = "0.1.0"
