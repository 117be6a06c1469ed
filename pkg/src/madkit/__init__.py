"""madkit: dual-view self-distillation for single-cell microscopy embeddings.

The package trains a student/teacher pair of small vision transformers on
two views of each cell (a masked morphology crop and a wider neighborhood
crop), couples the views through a cross-view distillation loss, and
evaluates the resulting embeddings on clustering, retrieval, and
expression-prediction tasks over a synthetic tissue benchmark.
"""

__version__ = "0.1.0"
