"""Few-shot object detection with graph-refined category prototypes.

Subpackages cover the full desk-scale pipeline: a reverse-mode tensor
core, the word-vector category graph, prototype refinement, reweighted
predictor heads, episodic synthetic tasks, VOC-protocol evaluation, and
the training/ablation harness behind the ``protodet`` CLI.
"""

__version__ = "0.1.0"
