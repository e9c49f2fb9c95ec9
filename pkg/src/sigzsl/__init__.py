"""Zero-shot modulation recognition: a numpy CNN with center and reconstruction
losses, a distance-threshold discriminator with an online unknown registry,
a synthetic I/Q corpus generator and the evaluation metrics."""

__version__ = "0.1.0"
