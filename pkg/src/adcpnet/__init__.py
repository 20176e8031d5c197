"""Two-stage coarse-to-fine stereo matching with learned disparity candidates.

Importing the package stays light (no numpy) so that ``adcp`` can cap BLAS
threads from ``ADCP_THREADS`` before any numerical library loads.
"""

__version__ = "0.1.0"
