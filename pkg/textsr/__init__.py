"""
Recognition-guided latent diffusion for scene-text super-resolution
"""
