"""Heteroscedastic covariance estimation: TIC, TAC and baseline objectives."""
