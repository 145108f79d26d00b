"""Tests for edge_dedup."""
