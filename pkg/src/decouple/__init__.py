"""decouple: knowledge-slot induction for dialogue response generation.

A desk-scale library and CLI for training dialogue response models that
induce a textual knowledge sequence from the history, couple it back into
generation, and are evaluated by how their metrics move as the amount of
knowledge supplied at inference varies (the knowledge gap).  An enumeration
oracle suite verifies the underlying estimator and bound math on tiny
discrete instances.
"""

__version__ = "0.1.0"
