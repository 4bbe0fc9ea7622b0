"""Radiomic subtyping, ensemble fusion, adaptive post-processing and
lesion-wise evaluation for multi-model brain tumor segmentation."""

__version__ = "0.1.0"
