"""Ports layer - defines interfaces for persistence"""
