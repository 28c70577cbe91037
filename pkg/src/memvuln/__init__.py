"""Trace-driven memory vulnerability analysis for iterative solvers.

The package builds a conjugate-gradient workload on a 27-point Poisson
stencil, records its memory reference stream, replays that stream through
a three-level write-back cache model, and scores every data structure with
vulnerability metrics that are then validated against native fault
injection.
"""

__version__ = "0.1.0"
