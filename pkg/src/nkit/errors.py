# Copyright (c) 2026 The nkit developers
#
# Permission is hereby granted, free of charge, to any person obtaining a copy
# of this software and associated documentation files (the "Software"), to deal
# in the Software without restriction, including without limitation the rights
# to use, copy, modify, merge, publish, distribute, sublicense, and/or sell
# copies of the Software, and to permit persons to whom the Software is
# furnished to do so, subject to the following conditions:
#
# The above copyright notice and this permission notice shall be included in
# all copies or substantial portions of the Software.
#
# THE SOFTWARE IS PROVIDED "AS IS", WITHOUT WARRANTY OF ANY KIND, EXPRESS OR
# IMPLIED, INCLUDING BUT NOT LIMITED TO THE WARRANTIES OF MERCHANTABILITY,
# FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT. IN NO EVENT SHALL THE
# AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY CLAIM, DAMAGES OR OTHER
# LIABILITY, WHETHER IN AN ACTION OF CONTRACT, TORT OR OTHERWISE, ARISING FROM,
# OUT OF OR IN CONNECTION WITH THE SOFTWARE OR THE USE OR OTHER DEALINGS IN THE
# SOFTWARE.

"""Exceptions shared by the nkit modules."""


class NkitError(Exception):
    """Base class for all nkit specific errors."""


class ConfigError(NkitError, ValueError):
    """Raised when a run configuration does not validate."""


class NonConvergenceError(NkitError, RuntimeError):
    """Raised when a result that requires a converged solve did not get one.

    The :class:`nkit.elliptic_op.SolveReport` of the failed solve is kept in
    the ``report`` attribute.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class UnderresolvedAnomalyError(NkitError, ValueError):
    """Raised when an anomaly covers too few grid nodes."""


class SeriesHypothesisError(NkitError, ValueError):
    """Raised when |mu_a * n(x)| >= 1 somewhere on the anomaly."""
