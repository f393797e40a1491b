"""API routes init."""
