"""Finite-key security analysis of QKD protocols via phase-error SDPs."""
