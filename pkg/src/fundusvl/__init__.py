"""Knowledge-enhanced fundus image-text contrastive pretraining and evaluation."""

__version__ = "0.1.0"
