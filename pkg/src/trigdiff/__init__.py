"""trigdiff: invisible-trigger backdoors for small diffusion models.

Training (bi-level trigger learning for unconditional and text-guided
inpainting models), sampling (DDIM, second-order DPM solver, classifier-free
guidance), watermark verification, defense evaluation, and a standalone
numerical suite checking every closed-form derivation the pipeline relies on.
"""

__version__ = "0.1.0"
