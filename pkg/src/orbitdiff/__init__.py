"""orbitdiff: a desk-scale multi-view diffusion engine.

Identity- and camera-conditioned multi-view denoising with EDM
preconditioning, stochastic churned-Euler sampling, gradient-guided
channel-wise inpainting for shape normals, and an anchor/intermediate
planner that walks a full 360 degree orbit around a subject.  Everything
runs on procedurally generated ellipsoid scenes so the whole pipeline is
exercisable on a desktop CPU.
"""

__version__ = "0.1.0"
