"""Two-stage mitosis nuclei segmentation and candidate classification."""
__version__ = "0.1.0"
