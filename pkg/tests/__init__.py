"""Tests for forced_lagrangian"""
