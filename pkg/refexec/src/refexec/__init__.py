"""Reference external executor for the ExecRequest/ExecResponse protocol.

Single-shot: one request document on stdin, one response document on stdout.
Implements a closed-form ridge forecaster and a Gaussian window generator,
with its own measure implementations; it imports nothing from the engine.
"""

from __future__ import annotations

__version__ = "0.1.0"
