"""Tests for rwreader."""
