"""
wavelet_flow

Multi-scale normalizing-flow density models of images: a Haar wavelet pyramid whose base image and detail planes are
each modelled by their own (conditional) flow, trained independently per level.
"""

from wavelet_flow.model import (WaveletFlowModel, bits_per_dim, build_model, log_prob, sample_direct, super_resolve,
                                truncate)
from wavelet_flow.wavelet import build_pyramid, collapse_pyramid, haar_analyze, haar_synthesize, lowpass_to_level
