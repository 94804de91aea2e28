"""Tests for fielded-search."""
