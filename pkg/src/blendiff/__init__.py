"""Speech-driven blendshape animation toolkit.

Blendshape model construction by deformation transfer, smooth coefficient
fitting, a speech-conditioned diffusion model over coefficient sequences and
distribution-level evaluation metrics.
"""

__version__ = "0.1.0"
