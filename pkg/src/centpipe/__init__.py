"""centpipe: entropy features from small convolutional networks.

Trains compact CNNs from scratch, summarizes their filter activations with
conditional-entropy (CENT) features built on 256-bin histograms, classifies
the feature vectors with a from-scratch random forest, and checks the
information-theoretic claims behind the method at desk scale.
"""

__version__ = "0.1.0"
