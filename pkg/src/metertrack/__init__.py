"""
Beat and downbeat tracking for small, homogeneous training sets.

Modules
-------
audio
    STFT, spectral flux envelopes and filterbank features.
hmm
    Sparse transition models and Viterbi decoding.
bayesbeat
    Bar pointer model with GMM observations.
tcn
    Dilated convolutional activation model with training loops.
decoders
    DBN beat/downbeat decoders and a dynamic programming baseline.
evaluation
    F-measure, continuity scores and bootstrap summaries.
experiment
    Subset protocol, strategy runs and result tables.
profile
    Tatum strength profiles.
synth
    Synthetic percussion corpora with exact annotations.

"""

__version__ = '0.1.0'
