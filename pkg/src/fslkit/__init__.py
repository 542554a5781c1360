"""Few-shot learning toolkit: semi-supervised pre-training, pseudo-label
meta-training, and episodic evaluation on feature-vector datasets."""

__version__ = "0.1.0"
