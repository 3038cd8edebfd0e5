"""Few-view neural radiance fields with cross-view feature fusion and paired-ray regularisers."""
__version__ = "0.1.0"
