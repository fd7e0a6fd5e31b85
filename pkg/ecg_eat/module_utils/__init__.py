"""Shared helpers used by every ecg_eat module."""
