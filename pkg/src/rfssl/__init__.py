"""Self-supervised representation learning for RF ultrasound patches.

Modules
-------
rf_signal
    Analytic signal, physics-inspired and rigid augmentations, patch normalization.
data
    Frames, biopsy cores, patch extraction, patient splits and the RF phantom.
nn
    Residual CNN, projector and head; Adam, NovoGrad and the learning-rate schedule.
losses
    VICReg, NT-Xent and BYOL objectives.
train, metrics, heatmap
    Training loops, core-wise evaluation and heatmap rendering.
experiment, cli
    Experiment harness and command-line front end.
"""

__version__ = "0.1.0"
