"""pathnav: query-guided region-of-interest navigation on pyramid images.

The package is organized around a navigation agent that iteratively picks
high-resolution regions from a tiled image pyramid under the direction of a
pluggable policy (a chat model, an oracle that reads planted ground truth, or
scripted mocks), plus the two reference selection strategies, six downstream
task runners, and the statistics used to evaluate them.
"""

__version__ = "0.1.0"

from pathnav.errors import PathnavError

__all__ = ["PathnavError", "__version__"]
