"""sdlab: a small, self-contained diffusion inversion and editing laboratory.

Pixel-space DDIM diffusion on a procedural toy image world, a minimal
reverse-mode autodiff engine underneath, value-branch prompt-embedding
inversion on top, and an attention-injection editing controller above that.
"""

__version__ = "0.1.0"
