"""Small helpers: covariance interchange files and timing."""
