"""Pydantic schemas for experiment configs and persisted trial records."""
