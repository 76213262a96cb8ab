"""Short-horizon gaze forecasting from 1000 Hz eye-tracking signals.

Subpackages cover the full pipeline: signal ingestion and differentiation,
velocity-threshold event classification, an oculomotor plant simulator and
synthetic cohort generator, a plant-informed Kalman predictor, a small
from-scratch LSTM predictor with extrapolation baselines, signal-quality
features, and event-conditioned evaluation metrics. The ``gazecast`` CLI
chains these into a cached end-to-end run.
"""

__version__ = "0.1.0"
