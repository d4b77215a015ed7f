"""Tests for magnetrec."""
