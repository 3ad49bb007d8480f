"""Flow-sequence language model for network intrusion detection.

Flows are discretized into six token ids, windows of consecutive flows are
treated as sentences, a transformer encoder is pre-trained by masked-flow
prediction and then fine-tuned to label every flow benign or malicious.
"""

__version__ = "0.1.0"
