"""Context-expanded speech recognition at desk scale.

A joint CTC-attention Transformer/Conformer recognizer that conditions
each utterance on the acoustic history of its conversation, with an
activation-recycling cache that makes sliding-window decoding pay only
for the newest utterance, plus a streaming mode built on CTC-triggered
attention.
"""

__version__ = "0.1.0"
