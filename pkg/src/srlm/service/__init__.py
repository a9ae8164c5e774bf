"""HTTP service wrapping the pipeline library."""
