"""Uncertainty estimation for landmark-based contour segmentation.

A convolutional encoder with a variational latent space feeds a graph
convolutional decoder that regresses contour landmark coordinates. The
package bundles the model, a synthetic dataset generator with exact ground
truth, training, two uncertainty measures (latent and node-wise predictive),
corruption experiments, and out-of-distribution detection.
"""

__version__ = "0.1.0"
