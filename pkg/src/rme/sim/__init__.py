"""Closed-loop simulation harness."""
