"""Text-conditioned video prediction in a frozen style-generator latent space."""
