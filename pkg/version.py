"""
Version metadata for the dense-prior detector.

Usage:
    from version import get_version
    print(get_version())
"""

__version__ = "v0.1.0"


def get_version() -> str:
    """
    Return the current package version string.
    """
    return __version__
