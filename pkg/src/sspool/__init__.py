"""Speech representation learning with boundary-predicting soft pooling.

Library layout:
    autodiff    reverse-mode differentiation over a small primitive set
    audio       WAV I/O and the AudioBuffer container
    augment     phase-vocoder time stretch, pitch shift, alignment maps
    synth       source-filter synthetic speech with exact unit boundaries
    encoder     strided conv frame encoder, recurrent context net, InfoNCE
    pooling     boundary prediction and Gaussian-kernel soft pooling
    alignment   contrastive loss tying pooled original/augmented sequences
    training    RAdam trainer, checkpoints, metrics log
    evaluation  boundary F1/R-value, DTW ABX, speaker probe, .PHN parsing
    cli         command line front end (see `sspool --help`)
"""

__version__ = "0.1.0"
