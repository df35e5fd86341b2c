"""Fair personalized pricing on social networks with graph encoders and adversarial debiasing."""

__version__ = "0.1.0"
