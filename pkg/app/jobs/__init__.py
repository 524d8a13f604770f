"""RQ job functions for distributed trial units."""
