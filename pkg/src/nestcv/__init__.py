"""nestcv: fault-tolerant nested cross-validation and deployment-model selection.

The engine plans and schedules training tasks over a pool of workers,
checkpoints everything for crash recovery, and aggregates fold metrics into
uncertainty-quantified performance estimates. Training itself is pluggable:
two deterministic built-in trainers cover testing and desk-scale runs, and an
external-process host bridges to real training stacks over a line protocol.
"""

__version__ = "0.1.0"
