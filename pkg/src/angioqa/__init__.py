"""angioqa: quality assessment for synthetic X-ray angiography.

A desk-scale pipeline: a small autodiff tensor library, a three-image
fusion model with metric-specific attention branches, five-level score
estimation, a BT.500-style subjective-score pipeline producing MOS labels,
PLCC/SRCC evaluation, a synthetic triplet generator, a trainer with an
ablation harness, and a CLI plus HTTP annotation service.
"""

__version__ = "0.1.0"
