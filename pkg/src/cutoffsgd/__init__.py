"""Dynamic-cutoff synchronous SGD: a learned model of worker runtimes picks,
each iteration, how many of the fastest workers to wait for."""

__version__ = "0.1.0"
