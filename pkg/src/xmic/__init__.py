"""Video-conditioned text classifiers (X-MIC) over frozen vision-language embeddings."""

__version__ = "0.1.0"
