"""Two-stage decoding of images from 1D voxel signals.

Stage A pretrains a masked-patch transformer autoencoder on voxel vectors;
Stage B finetunes its encoder to condition a latent diffusion denoiser, both
through cross-attention and through the time embedding.
"""
__version__ = "0.1.0"
