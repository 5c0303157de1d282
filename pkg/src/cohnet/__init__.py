"""Forest height inversion from InSAR coherence with a frozen neural surrogate.

Subpackages and modules:

- ``raster``: CHR1 rasters, patching and reassembly
- ``coherence``: boxcar coherence and decorrelation budgets
- ``rvog``: random-volume-over-ground coherence and height inversion
- ``simulate``: synthetic scenes, SLC pairs and datasets
- ``nn``: numpy layers with hand-written backward passes, Adam, weight files
- ``surrogate``: the surrogate inversion network
- ``trainer``: end-to-end training, the direct baseline, evaluation
- ``metrics``, ``export``, ``experiments``, ``cli``
"""

__version__ = "0.1.0"
