"""Preictal EEG classification: EDF ingest, filtering, MFCC features, a small
CNN with channel attention on a home-grown autodiff engine, evaluation
protocols and Shapley-based channel importance."""

__version__ = "0.1.0"
