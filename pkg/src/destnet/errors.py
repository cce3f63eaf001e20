"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, DataError exits 2,
NumericError exits 3. Plain ValueError is reserved for violated call
contracts (bad shapes, bad arguments) and also exits 2.
"""


class DataError(Exception):
    """Invalid dataset content, record, or model/data mismatch."""


class NumericError(Exception):
    """Non-finite values or a failed numerical check during compute."""
