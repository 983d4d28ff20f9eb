"""Multi-branch RepVGG chest X-ray classifier in plain numpy: training,
structural re-parameterization, HOG lung ROI, Grad-CAM and evaluation."""

__version__ = "0.1.0"
