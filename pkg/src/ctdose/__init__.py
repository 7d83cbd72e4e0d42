"""Learned patient-specific CT dose prescription with a hard image-quality target.

Submodules are imported on demand so that ``ctdose.cli`` can pin thread
counts before numpy's BLAS is loaded.
"""

__version__ = "0.1.0"
