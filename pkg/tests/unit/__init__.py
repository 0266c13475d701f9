"""
Unit tests package initialization
"""
