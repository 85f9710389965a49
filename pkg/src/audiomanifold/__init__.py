"""Audio to depth/segmentation through a learnt visual manifold.

Stage one trains a VQ-VAE on a visual modality; stage two trains an
audio-transformation network that regresses that VQ-VAE's latents from
multi-channel mel spectrograms. See ``audiomanifold.cli`` for the workflow.
"""
__version__ = "0.1.0"
