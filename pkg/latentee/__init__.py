"""
LatentEE - latent exposure models with longitudinal outcomes
"""
__version__ = "1.0.0"
