"""Speech/non-speech segmentation: energy VAD, a CNN frame classifier and HMM smoothing."""

__version__ = "0.1.0"
